"""Run configuration: one JSON document drives every CLI stage.

Every key is optional; missing keys take the dataclass defaults.  Unknown
keys and wrongly typed values raise :class:`ConfigurationError` naming the
offending field.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple

from .cvr_model import Activation, MLPArch, TrainConfig
from .datagen import GenConfig
from .errors import ConfigurationError
from .evaluator import PipelineOptions
from .imputer import LRHyper
from .ppct_protocol import ProtocolConfig
from .settings import EarlyStopping, ExperimentSetting, FixedEpochs, SettingKind

# One window spanning horizon + max delay: every callback lands with its clicks.
SWEEP_PROTOCOL = ProtocolConfig(window_h=768.0)
LE13_FIXED_EPOCHS = 44  # median of oracle_epoch_count over seeds 0-9 of the default world

DEFAULT_SETTINGS: Tuple[ExperimentSetting, ...] = (
    ExperimentSetting(SettingKind.NON_PPCT),
    ExperimentSetting(SettingKind.ANDROID_ONLY),
    ExperimentSetting(SettingKind.ANDROID_PLUS_IOS_LE13, stopping_override=FixedEpochs(LE13_FIXED_EPOCHS)),
    ExperimentSetting(SettingKind.OPT_IN_ONLY),
    ExperimentSetting(SettingKind.POST_RANKING_SIGNALS),
)


@dataclass(frozen=True)
class RunConfig:
    gen: GenConfig = GenConfig()
    protocol: ProtocolConfig = SWEEP_PROTOCOL
    train: TrainConfig = TrainConfig()
    hidden: Tuple[int, ...] = (64, 32)
    activation: Activation = Activation.RELU
    arch_seed: int = 0
    imputer: LRHyper = LRHyper()
    settings: Tuple[ExperimentSetting, ...] = DEFAULT_SETTINGS
    rates: Tuple[float, ...] = (0.0, 0.2, 0.5, 0.8)
    n_seeds: int = 10
    output_dir: str = "runs/default"
    use_mtl: bool = False
    calibrate: bool = True
    calibration_level: str = "group"
    test_fraction: float = 0.2
    n_jobs: int = 1

    def __post_init__(self):
        if list(self.rates) != sorted(self.rates):
            raise ConfigurationError("rates", "must be sorted ascending")
        if any(not 0.0 <= r <= 1.0 for r in self.rates):
            raise ConfigurationError("rates", "every rate must lie in [0, 1]")
        if self.n_seeds < 1:
            raise ConfigurationError("n_seeds", "must be >= 1")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigurationError("test_fraction", "must lie in (0, 1)")
        if self.calibration_level not in ("group", "token"):
            raise ConfigurationError("calibration_level", "must be 'group' or 'token'")
        if self.n_jobs < 1:
            raise ConfigurationError("n_jobs", "must be >= 1")

    @property
    def arch(self) -> MLPArch:
        return MLPArch((self.gen.dim_x, *self.hidden, 1), self.activation, self.arch_seed)

    @property
    def options(self) -> PipelineOptions:
        return PipelineOptions(
            test_fraction=self.test_fraction,
            use_mtl=self.use_mtl,
            calibrate=self.calibrate,
            calibration_level=self.calibration_level,
            imputer=self.imputer,
        )


def _build(cls, data: Any, prefix: str, converters: Mapping[str, Any] = {}, base: Any = None):
    if data is None:
        return base if base is not None else cls()
    if not isinstance(data, dict):
        raise ConfigurationError(prefix, f"expected a mapping, got {type(data).__name__}")
    names = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in names:
            raise ConfigurationError(f"{prefix}.{key}", "unknown field")
        if key in converters:
            value = converters[key](value, f"{prefix}.{key}")
        else:
            value = _coerce(value, names[key].default, f"{prefix}.{key}")
        kwargs[key] = value
    try:
        return dataclasses.replace(base, **kwargs) if base is not None else cls(**kwargs)
    except ConfigurationError as exc:
        raise ConfigurationError(f"{prefix}.{exc.field}", str(exc).split(": ", 1)[-1]) from None
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(prefix, str(exc)) from None


def _coerce(value: Any, default: Any, name: str) -> Any:
    if default is dataclasses.MISSING or default is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigurationError(name, f"expected true/false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(name, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(name, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigurationError(name, f"expected a string, got {value!r}")
        try:
            return type(default)(value)  # enums
        except ValueError:
            raise ConfigurationError(name, f"invalid value {value!r}") from None
    return value


def _stopping(value: Any, name: str):
    if isinstance(value, dict) and len(value) == 1:
        (kind, arg), = value.items()
        try:
            if kind == "early_stopping":
                return EarlyStopping(int(arg))
            if kind == "fixed_epochs":
                return FixedEpochs(int(arg))
        except (TypeError, ValueError, ConfigurationError) as exc:
            raise ConfigurationError(name, str(exc)) from None
    raise ConfigurationError(name, 'expected {"early_stopping": patience} or {"fixed_epochs": n}')


def _setting(value: Any, name: str) -> ExperimentSetting:
    if isinstance(value, str):
        value = {"kind": value}
    if not isinstance(value, dict) or "kind" not in value:
        raise ConfigurationError(name, f"expected a setting name or mapping with 'kind', got {value!r}")
    extra = set(value) - {"kind", "fixed_epochs"}
    if extra:
        raise ConfigurationError(f"{name}.{sorted(extra)[0]}", "unknown field")
    try:
        kind = SettingKind(value["kind"])
    except ValueError:
        raise ConfigurationError(f"{name}.kind", f"unknown setting {value['kind']!r}") from None
    override = value.get("fixed_epochs")
    if override is None and kind is SettingKind.ANDROID_PLUS_IOS_LE13:
        override = LE13_FIXED_EPOCHS
    return ExperimentSetting(kind, stopping_override=FixedEpochs(int(override)) if override else None)


def _float_tuple(value, name):
    if not isinstance(value, list) or any(isinstance(v, bool) or not isinstance(v, (int, float)) for v in value):
        raise ConfigurationError(name, "expected a list of numbers")
    return tuple(float(v) for v in value)


def _int_tuple(value, name):
    if not isinstance(value, list) or any(isinstance(v, bool) or not isinstance(v, int) for v in value):
        raise ConfigurationError(name, "expected a list of integers")
    return tuple(value)


def config_from_dict(data: Mapping[str, Any]) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigurationError("<root>", "config must be a JSON object")
    data = dict(data)
    kwargs: Dict[str, Any] = {}
    kwargs["gen"] = _build(GenConfig, data.pop("gen", None), "gen")
    kwargs["protocol"] = _build(ProtocolConfig, data.pop("protocol", None), "protocol", base=SWEEP_PROTOCOL)
    kwargs["train"] = _build(TrainConfig, data.pop("train", None), "train", {"stopping": _stopping})
    kwargs["imputer"] = _build(LRHyper, data.pop("imputer", None), "imputer")
    if "settings" in data:
        raw = data.pop("settings")
        if not isinstance(raw, list):
            raise ConfigurationError("settings", "expected a list")
        kwargs["settings"] = tuple(_setting(v, f"settings[{i}]") for i, v in enumerate(raw))
    if "rates" in data:
        kwargs["rates"] = _float_tuple(data.pop("rates"), "rates")
    if "hidden" in data:
        kwargs["hidden"] = _int_tuple(data.pop("hidden"), "hidden")
    defaults = {f.name: f.default for f in dataclasses.fields(RunConfig)}
    for key, value in data.items():
        if key not in defaults:
            raise ConfigurationError(key, "unknown field")
        kwargs[key] = _coerce(value, defaults[key], key)
    try:
        cfg = RunConfig(**kwargs)
        cfg.arch  # validate architecture early
    except ConfigurationError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigurationError("<root>", str(exc)) from None
    return cfg


def load_config(path: Optional[Path]) -> Tuple[RunConfig, str]:
    """Parse a config file; returns the config and the SHA-256 of its bytes."""
    if path is None:
        raw = b"{}"
    else:
        raw = Path(path).read_bytes()
    try:
        data = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ConfigurationError("<file>", f"{path}: invalid JSON ({exc})") from None
    return config_from_dict(data), hashlib.sha256(raw).hexdigest()


def config_to_dict(cfg: RunConfig) -> Dict[str, Any]:
    """JSON-ready view of a config, round-trippable through config_from_dict."""

    def plain(obj):
        d = {}
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            if isinstance(v, (EarlyStopping,)):
                v = {"early_stopping": v.patience}
            elif isinstance(v, FixedEpochs):
                v = {"fixed_epochs": v.n}
            elif hasattr(v, "value"):
                v = v.value
            d[f.name] = v
        return d

    out: Dict[str, Any] = {
        "gen": plain(cfg.gen),
        "protocol": plain(cfg.protocol),
        "train": plain(cfg.train),
        "imputer": plain(cfg.imputer),
        "settings": [
            {"kind": s.kind.value, **({"fixed_epochs": s.stopping_override.n} if s.stopping_override else {})}
            for s in cfg.settings
        ],
        "rates": list(cfg.rates),
        "hidden": list(cfg.hidden),
    }
    for key in ("activation", "arch_seed", "n_seeds", "output_dir", "use_mtl", "calibrate", "calibration_level", "test_fraction", "n_jobs"):
        v = getattr(cfg, key)
        out[key] = v.value if hasattr(v, "value") else v
    return out
