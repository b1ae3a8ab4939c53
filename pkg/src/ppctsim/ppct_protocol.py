"""Simulation of the privacy-preserving conversion reporting channel.

Clicks receive a small group token on the source side.  Conversions come
back later as anonymous callbacks carrying only (target app, token, report
time).  Callbacks and clicks are folded into group labels per tiling time
window, and groups with too few clicks are suppressed.
"""
from __future__ import annotations

import enum
import hashlib
import math
from collections import defaultdict
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .datagen import LogRecord
from .errors import ConfigurationError

MAX_TOKEN_BITS = 8

GroupKey = Tuple[int, int, float]  # (target_app, token value, window_start)


class GroupingPolicy(str, enum.Enum):
    ROUND_ROBIN = "RoundRobin"
    HASH_OF_AD = "HashOfAd"
    COHORT = "Cohort"


@dataclass(frozen=True, order=True)
class GroupToken:
    value: int
    bits: int = 5

    def __post_init__(self):
        if not 1 <= self.bits <= MAX_TOKEN_BITS:
            raise ConfigurationError("bits", f"must lie in [1, {MAX_TOKEN_BITS}], got {self.bits}")
        if not 0 <= self.value < (1 << self.bits):
            raise ValueError(f"token value {self.value} does not fit in {self.bits} bits")


@dataclass(frozen=True)
class ConversionCallback:
    # Deliberately no record, user or feature fields.
    target_app: int
    token: GroupToken
    report_time: float


@dataclass(frozen=True)
class GroupLabel:
    target_app: int
    token: GroupToken
    window_start: float
    window_end: float
    click_count: int
    conversions: int
    suppressed: bool = False

    @property
    def key(self) -> GroupKey:
        return (self.target_app, self.token.value, self.window_start)


@dataclass(frozen=True)
class ProtocolConfig:
    bits: int = 5
    delay_min_h: float = 24.0
    delay_max_h: float = 48.0
    window_h: float = 168.0
    window_stride_h: Optional[float] = None
    suppression_k: int = 10
    grouping_policy: GroupingPolicy = GroupingPolicy.ROUND_ROBIN
    count_noise_std: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "grouping_policy", GroupingPolicy(self.grouping_policy))
        if not 1 <= self.bits <= MAX_TOKEN_BITS:
            raise ConfigurationError("bits", f"must lie in [1, {MAX_TOKEN_BITS}], got {self.bits}")
        if self.delay_min_h < 0:
            raise ConfigurationError("delay_min_h", "must be >= 0")
        if self.delay_min_h > self.delay_max_h:
            raise ConfigurationError("delay_max_h", "must be >= delay_min_h")
        if not self.window_h > 0:
            raise ConfigurationError("window_h", "must be > 0")
        if self.window_stride_h is not None and self.window_stride_h != self.window_h:
            raise ConfigurationError("window_stride_h", "windows must tile the horizon (stride == window_h)")
        if self.suppression_k < 0:
            raise ConfigurationError("suppression_k", "must be >= 0")
        if self.count_noise_std < 0:
            raise ConfigurationError("count_noise_std", "must be >= 0")


@dataclass
class TokenState:
    """Round-robin cursor per target app; owned by a single assigner."""

    next_value: Dict[int, int] = field(default_factory=dict)


def assign_group_token(record: LogRecord, policy: GroupingPolicy, state: TokenState, bits: int = 5) -> GroupToken:
    if not record.y:
        raise ValueError(f"record {record.record_id} was not clicked; only clicks carry tokens")
    policy = GroupingPolicy(policy)
    size = 1 << bits
    if policy is GroupingPolicy.ROUND_ROBIN:
        v = state.next_value.get(record.target_app, 0)
        state.next_value[record.target_app] = (v + 1) % size
        return GroupToken(v, bits)
    if policy is GroupingPolicy.HASH_OF_AD:
        ad = getattr(record, "ad_id", None)
        if ad is None or ad < 0:
            raise ConfigurationError("grouping_policy", "HashOfAd requires an ad id on every click")
        digest = hashlib.blake2b(str(ad).encode(), digest_size=4).digest()
        return GroupToken(int.from_bytes(digest, "big") % size, bits)
    # Cohort: non-random grouping keyed on the sign of the first ranking feature.
    if record.x is None or len(record.x) == 0:
        raise ConfigurationError("grouping_policy", "Cohort requires ranking features")
    return GroupToken(int(record.x[0] >= 0.0), bits)


def assign_tokens(records: Iterable[LogRecord], config: ProtocolConfig) -> Dict[int, GroupToken]:
    """Tokens for every click, processed in input order."""
    state = TokenState()
    return {
        r.record_id: assign_group_token(r, config.grouping_policy, state, config.bits)
        for r in records
        if r.y
    }


def conversion_delays(records: Sequence[LogRecord], config: ProtocolConfig, seed: int) -> Dict[int, float]:
    """Reporting delay of every converted click, keyed by record id.

    Simulator-side ground truth; callbacks never carry the record id.
    """
    converted = [r for r in records if r.y and r.z]
    rng = np.random.default_rng([seed, 0xCA11])
    if config.delay_min_h == config.delay_max_h:
        delays = np.full(len(converted), float(config.delay_min_h))
    else:
        delays = rng.uniform(config.delay_min_h, config.delay_max_h, len(converted))
    return {r.record_id: float(d) for r, d in zip(converted, delays)}


def emit_callbacks(
    records: Sequence[LogRecord],
    tokens: Mapping[int, GroupToken],
    config: ProtocolConfig,
    seed: int,
) -> List[ConversionCallback]:
    converted = [r for r in records if r.y and r.z]
    if not converted:
        return []
    delays = conversion_delays(converted, config, seed)
    times = np.array([r.click_time + delays[r.record_id] for r in converted])
    # random tie-break key so equal report times carry no trace of input order
    tiebreak = np.random.default_rng([seed, 0x71E]).permutation(len(converted))
    order = np.lexsort((tiebreak, times))
    return [
        ConversionCallback(converted[i].target_app, tokens[converted[i].record_id], float(times[i]))
        for i in order
    ]


def window_index(t: float, config: ProtocolConfig) -> int:
    return int(math.floor(t / config.window_h))


def group_key(record: LogRecord, token: GroupToken, config: ProtocolConfig) -> GroupKey:
    return (record.target_app, token.value, window_index(record.click_time, config) * config.window_h)


def aggregate_group_labels(
    clicks: Sequence[LogRecord],
    tokens: Mapping[int, GroupToken],
    callbacks: Sequence[ConversionCallback],
    config: ProtocolConfig,
    seed: int = 0,
) -> List[GroupLabel]:
    """Fold clicks and callbacks into one label per (app, token, window).

    Callbacks landing in a window without clicks for their (app, token) are
    dropped, mirroring how the source app only knows groups it created.
    """
    w = config.window_h
    click_count: Dict[Tuple[int, int, int], int] = defaultdict(int)
    for r in clicks:
        if not r.y:
            continue
        tok = tokens[r.record_id]
        click_count[(r.target_app, tok.value, window_index(r.click_time, config))] += 1
    conv: Dict[Tuple[int, int, int], int] = defaultdict(int)
    for cb in callbacks:
        conv[(cb.target_app, cb.token.value, window_index(cb.report_time, config))] += 1

    rng = np.random.default_rng([seed, 0x6A0])
    labels = []
    for key in sorted(click_count):
        app, value, wi = key
        g = conv.get(key, 0)
        if config.count_noise_std > 0:
            g = max(0, g + int(round(rng.normal(0.0, config.count_noise_std))))
        labels.append(
            GroupLabel(
                target_app=app,
                token=GroupToken(value, config.bits),
                window_start=wi * w,
                window_end=(wi + 1) * w,
                click_count=click_count[key],
                conversions=g,
            )
        )
    return labels


def apply_suppression(groups: Iterable[GroupLabel], k: int) -> List[GroupLabel]:
    if k < 0:
        raise ConfigurationError("suppression_k", "must be >= 0")
    return [replace(g, suppressed=True, conversions=0) if g.click_count < k else g for g in groups]


def straddling_conversions(records: Sequence[LogRecord], config: ProtocolConfig, seed: int) -> int:
    """Conversions whose click and report fall in different windows (ground truth)."""
    delays = conversion_delays(records, config, seed)
    return sum(
        1
        for r in records
        if r.y and r.z
        and window_index(r.click_time, config) != window_index(r.click_time + delays[r.record_id], config)
    )


@dataclass
class ProtocolRun:
    tokens: Dict[int, GroupToken]
    callbacks: List[ConversionCallback]
    groups: List[GroupLabel]

    def membership(self, records: Iterable[LogRecord], config: ProtocolConfig) -> Dict[int, GroupKey]:
        return {r.record_id: group_key(r, self.tokens[r.record_id], config) for r in records if r.y}


def simulate(records: Sequence[LogRecord], config: ProtocolConfig, seed: int) -> ProtocolRun:
    """Token assignment, callbacks, aggregation and suppression in one pass."""
    clicks = [r for r in records if r.y]
    tokens = assign_tokens(clicks, config)
    callbacks = emit_callbacks(clicks, tokens, config, seed)
    groups = aggregate_group_labels(clicks, tokens, callbacks, config, seed)
    groups = apply_suppression(groups, config.suppression_k)
    return ProtocolRun(tokens, callbacks, groups)
