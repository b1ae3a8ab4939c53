"""Command-line entry point: generate, simulate, train, evaluate, sweep.

Exit codes: 0 success, 2 configuration error, 3 runtime or data error.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
import time
import warnings
from pathlib import Path
from typing import List, Optional, Sequence

from . import __version__, csvio
from .config import RunConfig, config_to_dict, load_config
from .cvr_model import load_params, save_params
from .datagen import generate_logs
from .errors import ConfigurationError, PPCTError, StageError
from .evaluator import MetricsReport, evaluate_model, optin_sweep, split_users, train_setting
from .ppct_protocol import ProtocolConfig, simulate
from .settings import ExperimentSetting, SettingKind

log = logging.getLogger("ppctsim")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


class _Fail(Exception):
    def __init__(self, code: int, message: str):
        self.code = code
        super().__init__(message)


def _guard_outputs(paths: Sequence[Path], force: bool) -> None:
    existing = [str(p) for p in paths if p.exists()]
    if existing and not force:
        raise _Fail(EXIT_CONFIG, f"refusing to overwrite {', '.join(existing)} (pass --force)")


def _manifest(args, cfg_hash: str, seed: int, **extra) -> dict:
    return {
        "command": args.command,
        "ppctsim_version": __version__,
        "config_path": args.config or "<defaults>",
        "config_sha256": cfg_hash,
        "seed": seed,
        **extra,
    }


def _read_logs(path: Path):
    if not path.exists():
        raise _Fail(EXIT_RUNTIME, f"log file not found: {path} (run `generate` first or pass --logs)")
    return csvio.read_logs(path)


def _protocol_overrides(cfg: RunConfig, args) -> ProtocolConfig:
    changes = {
        "bits": args.bits,
        "delay_min_h": args.delay_min,
        "delay_max_h": args.delay_max,
        "window_h": args.window,
        "suppression_k": args.k,
        "grouping_policy": args.grouping,
    }
    changes = {k: v for k, v in changes.items() if v is not None}
    try:
        return dataclasses.replace(cfg.protocol, **changes)
    except ConfigurationError as exc:
        raise ConfigurationError(f"protocol.{exc.field}", str(exc).split(": ", 1)[-1]) from None


def cmd_generate(cfg: RunConfig, cfg_hash: str, args) -> None:
    out = Path(args.out)
    logs, manifest = out / "logs.csv", out / "logs.manifest"
    _guard_outputs([logs, manifest], args.force)
    records = generate_logs(cfg.gen)
    n = csvio.write_logs(logs, records, cfg.gen.dim_x, cfg.gen.dim_xp)
    csvio.write_manifest(
        manifest,
        _manifest(args, cfg_hash, cfg.gen.seed, rows=n, clicks=sum(r.y for r in records), conversions=sum(r.z for r in records), files="logs.csv"),
    )
    print(f"wrote {n} records to {logs}")


def cmd_simulate(cfg: RunConfig, cfg_hash: str, args) -> None:
    out = Path(args.out)
    protocol = _protocol_overrides(cfg, args)
    paths = [out / "callbacks.csv", out / "groups.csv", out / "simulate.manifest"]
    _guard_outputs(paths, args.force)
    records = _read_logs(Path(args.logs) if args.logs else out / "logs.csv")
    run = simulate(records, protocol, cfg.gen.seed)
    csvio.write_callbacks(paths[0], run.callbacks)
    csvio.write_groups(paths[1], run.groups)
    csvio.write_manifest(
        paths[2],
        _manifest(
            args,
            cfg_hash,
            cfg.gen.seed,
            callbacks=len(run.callbacks),
            groups=len(run.groups),
            suppressed=sum(g.suppressed for g in run.groups),
            **{f"protocol.{k}": (v.value if hasattr(v, "value") else v) for k, v in dataclasses.asdict(protocol).items()},
            files="callbacks.csv,groups.csv",
        ),
    )
    print(f"{len(run.callbacks)} callbacks, {len(run.groups)} groups ({sum(g.suppressed for g in run.groups)} suppressed)")


def _setting_from_args(cfg: RunConfig, args) -> ExperimentSetting:
    try:
        kind = SettingKind(args.setting)
    except ValueError:
        raise ConfigurationError("--setting", f"unknown setting {args.setting!r}") from None
    override = next((s.stopping_override for s in cfg.settings if s.kind is kind), None)
    return ExperimentSetting(kind, args.rate, override)


def cmd_train(cfg: RunConfig, cfg_hash: str, args) -> None:
    out = Path(args.out)
    setting = _setting_from_args(cfg, args)
    seed = cfg.gen.seed
    paths = [out / "model.ckpt", out / "trace.csv", out / "soft_labels.csv", out / "imputer.txt", out / "train.manifest"]
    _guard_outputs(paths, args.force)
    records = _read_logs(Path(args.logs) if args.logs else out / "logs.csv")
    cell = train_setting(setting, records, cfg.protocol, cfg.train, seed, cfg.arch, cfg.options)
    diag = cell.diagnostics
    save_params(cell.params, paths[0])
    csvio.write_trace(paths[1], diag.trace)
    files = ["model.ckpt", "trace.csv"]
    if diag.soft_labels:
        csvio.write_soft_labels(paths[2], diag.soft_labels)
        csvio.write_lr_params(paths[3], diag.lr_params)
        files += ["soft_labels.csv", "imputer.txt"]
    csvio.write_manifest(
        paths[4],
        _manifest(
            args, cfg_hash, seed,
            setting=setting.name, optin_rate=setting.optin_rate, n_hard=diag.n_hard, n_soft=diag.n_soft,
            best_epoch=diag.trace.best_epoch, epochs=len(diag.trace.epochs), files=",".join(files),
        ),
    )
    print(f"{setting.name} @ {setting.optin_rate:g}: {diag.n_hard} hard, {diag.n_soft} soft, best epoch {diag.trace.best_epoch}")


def cmd_evaluate(cfg: RunConfig, cfg_hash: str, args) -> None:
    out = Path(args.out)
    setting = _setting_from_args(cfg, args)
    seed = cfg.gen.seed
    paths = [out / "metrics.csv", out / "evaluate.manifest"]
    _guard_outputs(paths, args.force)
    ckpt = Path(args.model) if args.model else out / "model.ckpt"
    if not ckpt.exists():
        raise _Fail(EXIT_RUNTIME, f"model checkpoint not found: {ckpt}")
    params = load_params(ckpt)
    records = _read_logs(Path(args.logs) if args.logs else out / "logs.csv")
    _, test = split_users(records, cfg.test_fraction, seed)
    score, ece = evaluate_model(params, test)
    report = MetricsReport(setting, score, calibration_error=ece, seed=seed)
    csvio.atomic_write_text(paths[0], csvio.cells_csv([report]))
    csvio.write_manifest(paths[1], _manifest(args, cfg_hash, seed, model=str(ckpt), pr_auc=repr(score), files="metrics.csv"))
    print(f"PR-AUC {score:.4f}  calibration error {ece:.4f}")


def _summary(reports: Sequence[MetricsReport]) -> str:
    lines = [f"{'setting':<20} {'rate':>5} {'PR-AUC':>8} {'SE':>7} {'rel':>6}"]
    for row in csvio.report_rows(reports):
        name, rate, m, se, rel, n = row
        lines.append(f"{name:<20} {float(rate):>5.2f} {float(m):>8.4f} {float(se):>7.4f} {float(rel):>6.3f}")
    return "\n".join(lines) + "\n"


def cmd_sweep(cfg: RunConfig, cfg_hash: str, args) -> None:
    out = Path(args.out)
    paths = [out / "cells.csv", out / "report.csv", out / "summary.txt", out / "sweep.manifest"]
    _guard_outputs(paths, args.force)
    if not any(s.kind is SettingKind.NON_PPCT for s in cfg.settings):
        raise ConfigurationError("settings", "missing NonPPCT baseline; relative PR-AUC is undefined without it")
    done: List[MetricsReport] = []
    t0 = time.perf_counter()
    try:
        result = optin_sweep(
            cfg.rates, cfg.settings, cfg.n_seeds, cfg.gen, cfg.protocol, cfg.train, cfg.arch, cfg.options,
            n_jobs=cfg.n_jobs, on_cell=done.append,
        )
    except BaseException:
        if done:
            csvio.atomic_write_text(out / "cells.csv.partial", csvio.cells_csv(done))
        raise
    csvio.atomic_write_text(paths[0], csvio.cells_csv(result.cells))
    csvio.atomic_write_text(paths[1], csvio.report_csv(result.reports))
    summary = _summary(result.reports)
    csvio.atomic_write_text(paths[2], summary)
    csvio.write_manifest(
        paths[3],
        _manifest(args, cfg_hash, cfg.gen.seed, n_seeds=cfg.n_seeds, cells=len(result.cells),
                  seconds=f"{time.perf_counter() - t0:.1f}", files="cells.csv,report.csv,summary.txt"),
    )
    print(summary, end="")


COMMANDS = {
    "generate": cmd_generate,
    "simulate": cmd_simulate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ppctsim", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run config (defaults apply to missing keys)")
        p.add_argument("--seed", type=int, help="override gen.seed")
        p.add_argument("--out", help="output directory (default: config output_dir)")
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("simulate", "train", "evaluate"):
            p.add_argument("--logs", help="log CSV (default: <out>/logs.csv)")
        if name == "simulate":
            p.add_argument("--bits", type=int)
            p.add_argument("--delay-min", type=float)
            p.add_argument("--delay-max", type=float)
            p.add_argument("--window", type=float)
            p.add_argument("--k", type=int)
            p.add_argument("--grouping", choices=["RoundRobin", "HashOfAd", "Cohort"])
        if name in ("train", "evaluate"):
            p.add_argument("--setting", default=SettingKind.POST_RANKING_SIGNALS.value, choices=[k.value for k in SettingKind])
            p.add_argument("--rate", type=float, default=0.0, help="opt-in rate")
        if name == "evaluate":
            p.add_argument("--model", help="checkpoint (default: <out>/model.ckpt)")
        if name == "sweep":
            p.add_argument("--n-seeds", type=int)
            p.add_argument("--jobs", type=int)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if not args.verbose:
        warnings.filterwarnings("ignore", module=r"ppctsim\..*")
    try:
        try:
            cfg, cfg_hash = load_config(Path(args.config) if args.config else None)
        except OSError as exc:
            raise _Fail(EXIT_RUNTIME, f"cannot read config {args.config}: {exc.strerror}") from None
        changes = {}
        if args.seed is not None:
            changes["gen"] = dataclasses.replace(cfg.gen, seed=args.seed)
        if getattr(args, "n_seeds", None) is not None:
            changes["n_seeds"] = args.n_seeds
        if getattr(args, "jobs", None) is not None:
            changes["n_jobs"] = args.jobs
        if changes:
            cfg = dataclasses.replace(cfg, **changes)
        args.out = args.out or cfg.output_dir
        COMMANDS[args.command](cfg, cfg_hash, args)
        return EXIT_OK
    except ConfigurationError as exc:
        print(f"ppctsim {args.command}: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except _Fail as exc:
        print(f"ppctsim {args.command}: {exc}", file=sys.stderr)
        return exc.code
    except StageError as exc:
        print(f"ppctsim {args.command}: stage '{exc.stage}' failed: {exc.cause}", file=sys.stderr)
        return EXIT_RUNTIME
    except (PPCTError, OSError, ValueError) as exc:
        print(f"ppctsim {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
