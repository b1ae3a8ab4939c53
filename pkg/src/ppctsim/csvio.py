"""CSV artifacts, manifests and atomic file writes."""
from __future__ import annotations

import csv
import io
import os
import tempfile
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Set, Union

import numpy as np

from .cvr_model import TrainingTrace
from .datagen import LogRecord, Platform
from .imputer import LRParams, SoftLabel
from .ppct_protocol import ConversionCallback, GroupLabel, GroupToken

PathLike = Union[str, Path]

CALLBACK_HEADER = ["target_app", "token", "report_time"]
GROUP_HEADER = ["target_app", "token", "window_start", "window_end", "click_count", "conversions", "suppressed"]
SOFT_HEADER = ["record_id", "z_hat", "calibrated"]
TRACE_HEADER = ["epoch", "train_loss", "val_pr_auc"]
CELL_HEADER = ["setting", "optin_rate", "seed", "pr_auc", "calibration_error"]
REPORT_HEADER = ["setting", "optin_rate", "pr_auc_mean", "pr_auc_se", "relative_pr_auc", "n_seeds"]


def atomic_write_text(path: PathLike, text: str) -> None:
    """Write via a temp file in the same directory, then rename into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _f(v: float) -> str:
    return repr(float(v))


# -- logs --------------------------------------------------------------------


def log_header(dim_x: int, dim_xp: int) -> List[str]:
    return (
        ["record_id", "user_id", "platform", "os_version", "target_app", "ad_id", "opted_in", "click_time", "y", "z"]
        + [f"x_{i}" for i in range(dim_x)]
        + [f"xp_{i}" for i in range(dim_xp)]
    )


def write_logs(path: PathLike, records: Sequence[LogRecord], dim_x: int, dim_xp: int, withheld: Optional[Set[int]] = None) -> int:
    """Write a log CSV; ``z`` is left blank for ids in ``withheld`` or when unknown."""
    withheld = withheld or set()
    rows = []
    for r in records:
        z = "" if r.z is None or r.record_id in withheld else str(r.z)
        xp = [_f(v) for v in r.x_prime] if r.x_prime is not None else [""] * dim_xp
        rows.append(
            [r.record_id, r.user_id, r.platform.value, r.os_version, r.target_app, r.ad_id, int(r.opted_in), r.click_time, r.y, z]
            + [_f(v) for v in r.x]
            + xp
        )
    atomic_write_text(path, _csv_text(log_header(dim_x, dim_xp), rows))
    return len(rows)


def read_logs(path: PathLike) -> List[LogRecord]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        x_cols = [i for i, h in enumerate(header) if h.startswith("x_")]
        xp_cols = [i for i, h in enumerate(header) if h.startswith("xp_")]
        col = {h: i for i, h in enumerate(header)}
        out = []
        for row in reader:
            xp_raw = [row[i] for i in xp_cols]
            z = row[col["z"]]
            out.append(
                LogRecord(
                    record_id=int(row[col["record_id"]]),
                    user_id=int(row[col["user_id"]]),
                    x=np.array([float(row[i]) for i in x_cols]),
                    x_prime=np.array([float(v) for v in xp_raw]) if xp_raw and xp_raw[0] != "" else None,
                    y=int(row[col["y"]]),
                    z=int(z) if z != "" else None,
                    z_true_prob=None,
                    platform=Platform(row[col["platform"]]),
                    os_version=int(row[col["os_version"]]),
                    target_app=int(row[col["target_app"]]),
                    ad_id=int(row[col["ad_id"]]),
                    opted_in=bool(int(row[col["opted_in"]])),
                    click_time=int(row[col["click_time"]]),
                )
            )
    return out


# -- protocol ----------------------------------------------------------------


def write_callbacks(path: PathLike, callbacks: Sequence[ConversionCallback]) -> int:
    atomic_write_text(path, _csv_text(CALLBACK_HEADER, ([c.target_app, c.token.value, _f(c.report_time)] for c in callbacks)))
    return len(callbacks)


def read_callbacks(path: PathLike, bits: int = 5) -> List[ConversionCallback]:
    with open(path, newline="") as fh:
        return [
            ConversionCallback(int(r["target_app"]), GroupToken(int(r["token"]), bits), float(r["report_time"]))
            for r in csv.DictReader(fh)
        ]


def write_groups(path: PathLike, groups: Sequence[GroupLabel]) -> int:
    rows = (
        [g.target_app, g.token.value, _f(g.window_start), _f(g.window_end), g.click_count, g.conversions, int(g.suppressed)]
        for g in groups
    )
    atomic_write_text(path, _csv_text(GROUP_HEADER, rows))
    return len(groups)


def read_groups(path: PathLike, bits: int = 5) -> List[GroupLabel]:
    with open(path, newline="") as fh:
        return [
            GroupLabel(
                int(r["target_app"]),
                GroupToken(int(r["token"]), bits),
                float(r["window_start"]),
                float(r["window_end"]),
                int(r["click_count"]),
                int(r["conversions"]),
                bool(int(r["suppressed"])),
            )
            for r in csv.DictReader(fh)
        ]


# -- imputer / model -----------------------------------------------------------


def write_soft_labels(path: PathLike, soft: Sequence[SoftLabel]) -> int:
    atomic_write_text(path, _csv_text(SOFT_HEADER, ([s.record_id, _f(s.z_hat), int(s.calibrated)] for s in soft)))
    return len(soft)


def read_soft_labels(path: PathLike) -> List[SoftLabel]:
    with open(path, newline="") as fh:
        return [SoftLabel(int(r["record_id"]), float(r["z_hat"]), bool(int(r["calibrated"]))) for r in csv.DictReader(fh)]


def write_lr_params(path: PathLike, params: LRParams) -> None:
    text = f"# dim={params.dim} l2={params.l2!r}\n" + "\n".join(float(v).hex() for v in params.w) + "\n"
    atomic_write_text(path, text)


def read_lr_params(path: PathLike) -> LRParams:
    lines = Path(path).read_text().splitlines()
    meta = dict(kv.split("=") for kv in lines[0].lstrip("# ").split())
    w = np.array([float.fromhex(v) for v in lines[1:] if v])
    if w.size != int(meta["dim"]) + 1:
        raise ValueError(f"{path}: expected {int(meta['dim']) + 1} weights, found {w.size}")
    return LRParams(w, float(meta["l2"]))


def write_trace(path: PathLike, trace: TrainingTrace) -> int:
    atomic_write_text(path, _csv_text(TRACE_HEADER, ([e, _f(l), _f(v)] for e, l, v in trace.rows())))
    return len(trace.epochs)


# -- reports -------------------------------------------------------------------


def cell_rows(cells) -> List[list]:
    rows = [[c.setting.name, _f(c.optin_rate), c.seed, _f(c.pr_auc), _f(c.calibration_error)] for c in cells]
    return sorted(rows, key=lambda r: (r[0], float(r[1]), r[2]))


def report_rows(reports) -> List[list]:
    rows = [
        [r.setting.name, _f(r.optin_rate), _f(r.pr_auc), _f(r.pr_auc_se), _f(r.relative_pr_auc), r.n_seeds]
        for r in reports
    ]
    return sorted(rows, key=lambda r: (r[0], float(r[1])))


def cells_csv(cells) -> str:
    return _csv_text(CELL_HEADER, cell_rows(cells))


def report_csv(reports) -> str:
    return _csv_text(REPORT_HEADER, report_rows(reports))


def read_csv_dicts(path: PathLike) -> List[Dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# -- manifests -------------------------------------------------------------------


def write_manifest(path: PathLike, entries: Mapping[str, object]) -> None:
    atomic_write_text(path, "".join(f"{k}={v}\n" for k, v in entries.items()))


def read_manifest(path: PathLike) -> Dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if line and not line.startswith("#"):
            k, v = line.split("=", 1)
            out[k] = v
    return out
