"""The five training regimes compared in the opt-in study."""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional, Union

from .errors import ConfigurationError


class SettingKind(str, enum.Enum):
    NON_PPCT = "NonPPCT"
    ANDROID_ONLY = "AndroidOnly"
    ANDROID_PLUS_IOS_LE13 = "AndroidPlusIosLe13"
    OPT_IN_ONLY = "OptInOnly"
    POST_RANKING_SIGNALS = "PostRankingSignals"


RATE_DEPENDENT = frozenset({SettingKind.OPT_IN_ONLY, SettingKind.POST_RANKING_SIGNALS})


@dataclass(frozen=True)
class EarlyStopping:
    patience: int = 10

    def __post_init__(self):
        if self.patience < 1:
            raise ConfigurationError("patience", f"must be >= 1, got {self.patience}")


@dataclass(frozen=True)
class FixedEpochs:
    n: int

    def __post_init__(self):
        if self.n < 1:
            raise ConfigurationError("n", f"fixed epoch count must be >= 1, got {self.n}")


Stopping = Union[EarlyStopping, FixedEpochs]


@dataclass(frozen=True)
class ExperimentSetting:
    kind: SettingKind
    optin_rate: float = 0.0
    stopping_override: Optional[FixedEpochs] = None

    def __post_init__(self):
        kind = SettingKind(self.kind)
        object.__setattr__(self, "kind", kind)
        if not 0.0 <= self.optin_rate <= 1.0:
            raise ConfigurationError("optin_rate", f"must lie in [0, 1], got {self.optin_rate}")
        # rate-independent settings are normalised so equal settings compare equal
        if kind not in RATE_DEPENDENT:
            object.__setattr__(self, "optin_rate", 0.0)

    @property
    def name(self) -> str:
        return self.kind.value

    def at_rate(self, rate: float) -> "ExperimentSetting":
        return ExperimentSetting(self.kind, rate, self.stopping_override)
