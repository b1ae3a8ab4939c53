"""Experiment settings, single-seed pipeline runs and the opt-in sweep."""
from __future__ import annotations

import dataclasses
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import imputer as imp
from .cvr_model import FeatureView, MLPArch, TrainConfig, train, train_mtl
from .datagen import GenConfig, LogRecord, assign_optin, generate_logs, partition_labels
from .errors import ConfigurationError, PPCTError, StageError
from .metrics import calibration_error, impression_value, pr_auc  # noqa: F401  (re-exported)
from .ppct_protocol import ProtocolConfig, simulate
from .settings import ExperimentSetting, FixedEpochs, RATE_DEPENDENT, SettingKind

ALL_SETTINGS = tuple(ExperimentSetting(k) for k in SettingKind)


@dataclass(frozen=True)
class MetricsReport:
    setting: ExperimentSetting
    pr_auc: float
    pr_auc_se: float = 0.0
    relative_pr_auc: float = float("nan")
    calibration_error: float = float("nan")
    n_seeds: int = 1
    seed: Optional[int] = None  # set on single-seed reports
    rate: Optional[float] = None  # sweep row rate; rate-independent settings repeat per row

    def __post_init__(self):
        if self.n_seeds < 1:
            raise ValueError("n_seeds must be >= 1")

    @property
    def optin_rate(self) -> float:
        return self.setting.optin_rate if self.rate is None else self.rate


@dataclass
class CellDiagnostics:
    """Bookkeeping from one pipeline run, for audits and tests."""

    train_ids: set = field(default_factory=set)
    val_ids: set = field(default_factory=set)
    test_ids: set = field(default_factory=set)
    imputer_ids: set = field(default_factory=set)
    calibration_ids: set = field(default_factory=set)
    n_hard: int = 0
    n_soft: int = 0
    n_calibrated: int = 0
    imputer_invoked: bool = False
    trace: object = None
    params: object = None
    lr_params: object = None
    soft_labels: list = field(default_factory=list)
    groups: list = field(default_factory=list)


@dataclass(frozen=True)
class PipelineOptions:
    test_fraction: float = 0.2
    use_mtl: bool = False
    calibrate: bool = True
    calibration_level: str = "group"
    imputer: imp.LRHyper = imp.LRHyper()
    ece_bins: int = 10


def split_users(records: Sequence[LogRecord], test_fraction: float, seed: int) -> Tuple[List[LogRecord], List[LogRecord]]:
    """(train pool, test pool) split by user so no user straddles both."""
    users = np.unique([r.user_id for r in records])
    perm = np.random.default_rng([seed, 0x7E57]).permutation(users)
    test_users = set(perm[: int(round(test_fraction * users.size))].tolist())
    pool = [r for r in records if r.user_id not in test_users]
    test = [r for r in records if r.user_id in test_users]
    return pool, test


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except (PPCTError, ValueError, ArithmeticError, KeyError) as exc:
        raise StageError(name, exc) from exc


@dataclass
class TrainedCell:
    params: object
    diagnostics: CellDiagnostics
    test_records: List[LogRecord]


def train_setting(
    setting: ExperimentSetting,
    records: Sequence[LogRecord],
    protocol_cfg: ProtocolConfig,
    train_cfg: TrainConfig,
    seed: int,
    arch: Optional[MLPArch] = None,
    options: PipelineOptions = PipelineOptions(),
) -> TrainedCell:
    """Everything up to and including model training for one (setting, seed)."""
    diag = CellDiagnostics()
    if not records:
        raise StageError("partition", ValueError("no records"))
    dim_x = records[0].x.size
    arch = arch or MLPArch.default(dim_x)
    arch = dataclasses.replace(arch, seed=arch.seed + seed)
    cfg = dataclasses.replace(train_cfg, seed=train_cfg.seed + seed)
    if setting.kind is SettingKind.ANDROID_PLUS_IOS_LE13 and setting.stopping_override is not None:
        cfg = dataclasses.replace(cfg, stopping=setting.stopping_override)

    pool, test = split_users(records, options.test_fraction, seed)
    pool = _stage("optin", assign_optin, pool, setting.optin_rate, seed)
    part = _stage("partition", partition_labels, pool, setting)
    diag.n_hard = len(part.hard)

    soft_view = None
    if setting.kind is SettingKind.POST_RANKING_SIGNALS and part.unlabeled:
        diag.imputer_invoked = True
        lr = _stage("imputer-fit", imp.fit_post_ranking_lr, part.hard, options.imputer)
        soft = _stage("impute", imp.impute_soft_labels, part.unlabeled, lr)
        diag.imputer_ids = {r.record_id for r in part.hard}
        diag.lr_params = lr
        if options.calibrate:
            # The reporting channel sees real conversions; only counts come back.
            missing = {r.record_id for r in part.unlabeled}
            ppct_clicks = [r for r in pool if r.record_id in missing]
            run = _stage("protocol", simulate, ppct_clicks, protocol_cfg, seed)
            membership = run.membership(ppct_clicks, protocol_cfg)
            soft = _stage(
                "calibrate",
                imp.calibrate_soft_labels,
                soft,
                membership,
                run.groups,
                level=options.calibration_level,
                strict=False,
            )
            diag.groups = run.groups
            diag.calibration_ids = set(missing)
            diag.n_calibrated = sum(s.calibrated for s in soft)
        diag.soft_labels = soft
        soft_view = FeatureView.soft(part.unlabeled, soft)
        diag.n_soft = len(soft)

    hard_view = FeatureView.hard(part.hard) if part.hard else FeatureView.empty(dim_x)
    trainer = train_mtl if options.use_mtl and soft_view is not None else train
    params, trace = _stage("train", trainer, hard_view, soft_view, arch, cfg)
    diag.trace, diag.params = trace, params
    diag.train_ids = set(hard_view.record_ids.tolist()) | (set(soft_view.record_ids.tolist()) if soft_view else set())
    diag.val_ids = set(trace.val_record_ids)
    diag.train_ids -= diag.val_ids
    return TrainedCell(params, diag, test)


def evaluate_model(params, test_records: Sequence[LogRecord], ece_bins: int = 10) -> Tuple[float, float]:
    """(PR-AUC, calibration error) on the clicked test records, using true labels."""
    test_clicks = [r for r in test_records if r.y]
    if not test_clicks:
        raise StageError("evaluate", ValueError("test split has no clicks"))
    X_test = np.vstack([r.x for r in test_clicks])
    z_test = np.array([r.z for r in test_clicks], dtype=float)
    p = params.predict(X_test)
    score = _stage("evaluate", pr_auc, p, z_test)
    return score, calibration_error(p, z_test, ece_bins)


def run_setting_detailed(
    setting: ExperimentSetting,
    records: Sequence[LogRecord],
    protocol_cfg: ProtocolConfig,
    train_cfg: TrainConfig,
    seed: int,
    arch: Optional[MLPArch] = None,
    options: PipelineOptions = PipelineOptions(),
) -> Tuple[MetricsReport, CellDiagnostics]:
    cell = train_setting(setting, records, protocol_cfg, train_cfg, seed, arch, options)
    cell.diagnostics.test_ids = {r.record_id for r in cell.test_records if r.y}
    score, ece = evaluate_model(cell.params, cell.test_records, options.ece_bins)
    return MetricsReport(setting, score, calibration_error=ece, seed=seed), cell.diagnostics


def run_setting(
    setting: ExperimentSetting,
    records: Sequence[LogRecord],
    protocol_cfg: ProtocolConfig,
    train_cfg: TrainConfig,
    seed: int,
    arch: Optional[MLPArch] = None,
    options: PipelineOptions = PipelineOptions(),
) -> MetricsReport:
    """Partition, (impute and calibrate), train and score one setting for one seed."""
    return run_setting_detailed(setting, records, protocol_cfg, train_cfg, seed, arch, options)[0]


# -- sweep -----------------------------------------------------------------


@dataclass
class SweepResult:
    cells: List[MetricsReport]
    reports: List[MetricsReport]


def mean_se(values: Sequence[float]) -> Tuple[float, float]:
    v = np.asarray(values, dtype=float)
    if v.size < 2:
        return float(v.mean()), 0.0
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size))


def pooled_se(a: MetricsReport, b: MetricsReport) -> float:
    """Standard error of the difference of two independent means."""
    return math.hypot(a.pr_auc_se, b.pr_auc_se)


def _cell(args):
    setting, gen, protocol_cfg, train_cfg, arch, options, seed = args
    records = generate_logs(dataclasses.replace(gen, seed=gen.seed + seed))
    return run_setting(setting, records, protocol_cfg, train_cfg, seed, arch, options)


def optin_sweep(
    rates: Sequence[float],
    settings: Sequence[ExperimentSetting],
    n_seeds: int,
    gen: GenConfig,
    protocol_cfg: ProtocolConfig = ProtocolConfig(),
    train_cfg: TrainConfig = TrainConfig(),
    arch: Optional[MLPArch] = None,
    options: PipelineOptions = PipelineOptions(),
    n_jobs: int = 1,
    on_cell=None,
) -> SweepResult:
    """Run every (setting, rate, seed) cell and aggregate mean and SE per (setting, rate).

    Rate-independent settings run once per seed and are reported at every rate.
    """
    if n_seeds < 2:
        raise ConfigurationError("n_seeds", "need at least 2 seeds for a standard error")
    rates = [float(r) for r in rates]
    if rates != sorted(rates):
        raise ConfigurationError("rates", "must be sorted ascending")
    if not any(s.kind is SettingKind.NON_PPCT for s in settings):
        raise ConfigurationError("settings", "NonPPCT baseline is required for relative PR-AUC")

    grid: List[ExperimentSetting] = []
    for s in settings:
        for r in rates if s.kind in RATE_DEPENDENT else [0.0]:
            cell = s.at_rate(r)
            if cell not in grid:
                grid.append(cell)
    jobs = [(s, gen, protocol_cfg, train_cfg, arch, options, seed) for s in grid for seed in range(n_seeds)]
    cells = []
    pool = ProcessPoolExecutor(max_workers=n_jobs) if n_jobs > 1 else None
    try:
        for c in pool.map(_cell, jobs) if pool else map(_cell, jobs):
            cells.append(c)
            if on_cell is not None:
                on_cell(c)
    finally:
        if pool is not None:
            pool.shutdown(cancel_futures=True)

    by_setting: Dict[ExperimentSetting, List[MetricsReport]] = {}
    for c in cells:
        by_setting.setdefault(c.setting, []).append(c)
    base_mean, _ = mean_se([c.pr_auc for c in by_setting[ExperimentSetting(SettingKind.NON_PPCT)]])

    reports = []
    for s in settings:
        for r in rates:
            cell = s.at_rate(r)
            runs = by_setting[cell]
            m, se = mean_se([c.pr_auc for c in runs])
            ece, _ = mean_se([c.calibration_error for c in runs])
            reports.append(
                MetricsReport(
                    setting=cell,
                    pr_auc=m,
                    pr_auc_se=se,
                    relative_pr_auc=m / base_mean,
                    calibration_error=ece,
                    n_seeds=len(runs),
                    rate=r,
                )
            )
    return SweepResult(cells, reports)


def find_report(reports: Sequence[MetricsReport], kind: SettingKind, rate: float) -> MetricsReport:
    for r in reports:
        if r.setting.kind is kind and math.isclose(r.optin_rate, rate):
            return r
    raise KeyError((kind, rate))


def oracle_epoch_count(
    records: Sequence[LogRecord],
    train_cfg: TrainConfig,
    seed: int,
    arch: Optional[MLPArch] = None,
    options: PipelineOptions = PipelineOptions(),
) -> int:
    """Epoch count maximising *test* PR-AUC for Android + iOS<=13 training.

    This peeks at the test labels, which no real deployment could do; it is
    how a fixed epoch budget for that setting is obtained here.
    """
    setting = ExperimentSetting(SettingKind.ANDROID_PLUS_IOS_LE13)
    cfg = dataclasses.replace(train_cfg, stopping=FixedEpochs(train_cfg.max_epochs))
    scores: List[float] = []
    pool, test = split_users(records, options.test_fraction, seed)
    clicks = [r for r in test if r.y]
    X = np.vstack([r.x for r in clicks])
    z = np.array([r.z for r in clicks], dtype=float)
    part = partition_labels(pool, setting)
    arch = arch or MLPArch.default(records[0].x.size)
    train(
        FeatureView.hard(part.hard),
        None,
        dataclasses.replace(arch, seed=arch.seed + seed),
        dataclasses.replace(cfg, seed=cfg.seed + seed),
        on_epoch=lambda epoch, params: scores.append(pr_auc(params.predict(X), z)),
    )
    return int(np.argmax(scores)) + 1
