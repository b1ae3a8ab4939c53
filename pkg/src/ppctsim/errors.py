"""Exception hierarchy shared by every stage of the pipeline."""


class PPCTError(Exception):
    """Base class for all errors raised by ppctsim."""


class ConfigurationError(PPCTError, ValueError):
    """A configuration value is out of range or inconsistent."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class ShapeError(PPCTError, ValueError):
    pass


class DegenerateLabelError(PPCTError, ValueError):
    """Training labels contain a single class."""


class MissingSignalError(PPCTError, ValueError):
    def __init__(self, record_id: int):
        self.record_id = record_id
        super().__init__(f"record {record_id} has no post-ranking signals (not clicked?)")


class InfeasibleTargetError(PPCTError, ValueError):
    """A group's conversion count exceeds the number of soft labels it holds."""


class UndefinedMetricError(PPCTError, ValueError):
    pass


class DivergenceError(PPCTError, ArithmeticError):
    def __init__(self, epoch: int, loss: float):
        self.epoch = epoch
        self.loss = loss
        super().__init__(f"non-finite training loss {loss!r} at epoch {epoch}")


class StageError(PPCTError, RuntimeError):
    """Wraps a failure with the name of the pipeline stage it came from."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
