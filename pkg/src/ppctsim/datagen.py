"""Synthetic click/conversion logs with a known ground-truth model.

Each user owns a platform (Android or iOS), an OS version and a Poisson
number of impressions.  Ranking features ``x`` are standard normal, followed
by two context indicators (is-iOS, is-iOS-13-or-older) that a ranking model
would see in production.  Conversions follow a linear logit whose weight
vector differs between platforms; the legacy iOS cohort gets an additive
logit shift.  Post-ranking signals exist only for clicks and are built as
``alpha * (2z - 1) * u + noise``.
"""
from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence

import numpy as np

from .errors import ConfigurationError
from .settings import ExperimentSetting, SettingKind

N_CONTEXT = 2  # trailing indicator columns of x: is_ios, is_ios_le13
LEGACY_IOS_MAX = 13


class Platform(str, enum.Enum):
    ANDROID = "Android"
    IOS = "iOS"


@dataclass(frozen=True)
class GenConfig:
    n_users: int = 4000
    impressions_per_user: float = 8.0
    n_ads: int = 40
    n_apps: int = 4
    dim_x: int = 32
    dim_xp: int = 4
    ctr_base_logit: float = -1.0
    cvr_base_logit: float = -2.0
    feature_scale: float = 2.5
    ctr_feature_scale: float = 0.5
    platform_weight_corr: float = 0.0
    ios_offset: float = 0.0
    xp_signal_strength: float = 1.5
    ios_fraction: float = 0.5
    ios_le13_fraction: float = 0.085
    behavior_shift: float = 1.0
    horizon_h: int = 720
    seed: int = 0
    world_seed: int = 0

    def __post_init__(self):
        for name in ("n_users", "n_ads", "n_apps"):
            if getattr(self, name) < 0:
                raise ConfigurationError(name, "must be >= 0")
        if self.n_ads < 1 or self.n_apps < 1:
            raise ConfigurationError("n_ads" if self.n_ads < 1 else "n_apps", "must be >= 1")
        if self.impressions_per_user < 0:
            raise ConfigurationError("impressions_per_user", "must be >= 0")
        if self.dim_x < N_CONTEXT + 1:
            raise ConfigurationError("dim_x", f"must be >= {N_CONTEXT + 1} (last {N_CONTEXT} are context indicators)")
        if self.dim_xp < 1:
            raise ConfigurationError("dim_xp", "must be >= 1")
        for name in ("ios_fraction", "ios_le13_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigurationError(name, f"must lie in [0, 1], got {v}")
        for name in ("xp_signal_strength", "behavior_shift", "feature_scale", "ctr_feature_scale"):
            if getattr(self, name) < 0:
                raise ConfigurationError(name, "must be >= 0")
        if not -1.0 <= self.platform_weight_corr <= 1.0:
            raise ConfigurationError("platform_weight_corr", "must lie in [-1, 1]")
        if self.horizon_h < 1:
            raise ConfigurationError("horizon_h", "must be >= 1")

    @property
    def dim_features(self) -> int:
        """Number of standard-normal columns at the front of ``x``."""
        return self.dim_x - N_CONTEXT


@dataclass(frozen=True, eq=False)
class LogRecord:
    record_id: int
    user_id: int
    x: np.ndarray
    x_prime: Optional[np.ndarray]
    y: int
    z: Optional[int]
    z_true_prob: Optional[float] = field(repr=False)
    platform: Platform
    os_version: int
    target_app: int
    ad_id: int
    opted_in: bool
    click_time: int

    @property
    def is_legacy_ios(self) -> bool:
        return self.platform is Platform.IOS and self.os_version <= LEGACY_IOS_MAX


@dataclass
class LabeledPartition:
    """Clicked records split into individually labelled and label-free sets.

    Ground-truth probabilities are stripped from both sides and ``z`` is
    ``None`` throughout ``unlabeled``.
    """

    hard: List[LogRecord]
    unlabeled: List[LogRecord]


@dataclass(frozen=True)
class World:
    """Ground-truth parameters shared by every population drawn from a config."""

    cvr_w_android: np.ndarray
    cvr_w_ios: np.ndarray
    ctr_w: np.ndarray
    xp_direction: np.ndarray
    ad_app: np.ndarray

    def cvr_logit(self, cfg: GenConfig, feats: np.ndarray, is_ios: np.ndarray, is_le13: np.ndarray) -> np.ndarray:
        w = np.where(is_ios[:, None], self.cvr_w_ios[None, :], self.cvr_w_android[None, :])
        return (
            cfg.cvr_base_logit
            + np.einsum("ij,ij->i", feats, w)
            + cfg.ios_offset * is_ios
            + cfg.behavior_shift * is_le13
        )


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def build_world(cfg: GenConfig) -> World:
    rng = np.random.default_rng([cfg.world_seed, 0x57])
    d = cfg.dim_features
    a = _unit(rng.standard_normal(d))
    r = rng.standard_normal(d)
    orth = _unit(r - (r @ a) * a) if d > 1 else a
    rho = cfg.platform_weight_corr
    ios = rho * a + np.sqrt(max(0.0, 1.0 - rho**2)) * orth
    return World(
        cvr_w_android=cfg.feature_scale * a,
        cvr_w_ios=cfg.feature_scale * _unit(ios),
        ctr_w=cfg.ctr_feature_scale * _unit(rng.standard_normal(d)),
        xp_direction=_unit(rng.standard_normal(cfg.dim_xp)),
        ad_app=rng.integers(0, cfg.n_apps, size=cfg.n_ads),
    )


def _sigmoid(t: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * t))


def generate_logs(config: GenConfig) -> List[LogRecord]:
    world = build_world(config)
    rng = np.random.default_rng([config.seed, 0xDA7A])
    n_users = config.n_users
    if n_users == 0:
        return []

    is_ios_u = rng.random(n_users) < config.ios_fraction
    legacy_u = is_ios_u & (rng.random(n_users) < config.ios_le13_fraction)
    os_u = np.where(
        is_ios_u,
        np.where(legacy_u, rng.integers(12, 14, n_users), rng.integers(14, 16, n_users)),
        rng.integers(10, 14, n_users),
    )
    counts = rng.poisson(config.impressions_per_user, n_users)
    user = np.repeat(np.arange(n_users), counts)
    n = user.size
    if n == 0:
        return []

    is_ios = is_ios_u[user]
    is_le13 = legacy_u[user]
    feats = rng.standard_normal((n, config.dim_features))
    ad = rng.integers(0, config.n_ads, n)
    click_time = rng.integers(0, config.horizon_h, n)

    y = rng.random(n) < _sigmoid(config.ctr_base_logit + feats @ world.ctr_w)
    p_conv = _sigmoid(world.cvr_logit(config, feats, is_ios, is_le13))
    z = y & (rng.random(n) < p_conv)
    noise = rng.standard_normal((n, config.dim_xp))
    sign = (2.0 * z - 1.0)[:, None]
    xp = config.xp_signal_strength * sign * world.xp_direction[None, :] + noise

    x = np.hstack([feats, is_ios[:, None].astype(float), is_le13[:, None].astype(float)])
    records = []
    for i in range(n):
        clicked = bool(y[i])
        records.append(
            LogRecord(
                record_id=i,
                user_id=int(user[i]),
                x=x[i],
                x_prime=xp[i] if clicked else None,
                y=int(clicked),
                z=int(z[i]),
                z_true_prob=float(p_conv[i]) if clicked else 0.0,
                platform=Platform.IOS if is_ios[i] else Platform.ANDROID,
                os_version=int(os_u[user[i]]),
                target_app=int(world.ad_app[ad[i]]),
                ad_id=int(ad[i]),
                opted_in=False,
                click_time=int(click_time[i]),
            )
        )
    return records


def assign_optin(records: Sequence[LogRecord], optin_rate: float, seed: int) -> List[LogRecord]:
    """Opt iOS users in independently with probability ``optin_rate``.

    Every user draws one uniform variate from a stream keyed by ``seed`` and
    is opted in iff it falls below the rate, so the opted-in sets are nested
    as the rate grows.
    """
    if not 0.0 <= optin_rate <= 1.0:
        raise ConfigurationError("optin_rate", f"must lie in [0, 1], got {optin_rate}")
    if not records:
        return []
    max_uid = max(r.user_id for r in records)
    u = np.random.default_rng([seed, 0x0971]).random(max_uid + 1)
    out = []
    for r in records:
        if r.platform is Platform.IOS:
            flag = bool(u[r.user_id] < optin_rate)
            if flag != r.opted_in:
                r = dataclasses.replace(r, opted_in=flag)
        out.append(r)
    return out


def has_hard_label(record: LogRecord, setting: ExperimentSetting) -> bool:
    kind = setting.kind
    if kind is SettingKind.NON_PPCT or record.platform is Platform.ANDROID:
        return True
    if kind is SettingKind.ANDROID_ONLY:
        return False
    if record.is_legacy_ios:
        return True
    if kind is SettingKind.ANDROID_PLUS_IOS_LE13:
        return False
    return record.opted_in


def partition_labels(records: Iterable[LogRecord], setting: ExperimentSetting) -> LabeledPartition:
    if not isinstance(setting, ExperimentSetting):
        raise ConfigurationError("setting", f"expected ExperimentSetting, got {type(setting).__name__}")
    hard, unlabeled = [], []
    for r in records:
        if not r.y:
            continue
        if has_hard_label(r, setting):
            hard.append(dataclasses.replace(r, z_true_prob=None))
        else:
            unlabeled.append(dataclasses.replace(r, z=None, z_true_prob=None))
    return LabeledPartition(hard=hard, unlabeled=unlabeled)


def clicked(records: Iterable[LogRecord]) -> List[LogRecord]:
    return [r for r in records if r.y]
