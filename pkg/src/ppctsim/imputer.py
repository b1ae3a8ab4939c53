"""Soft labels from post-ranking signals.

A logistic regression on ``x_prime`` alone is fitted to individually
labelled clicks, then applied to clicks whose conversion label is missing.
Group conversion counts, when available, recalibrate those soft labels with
one additive logit shift per group.
"""
from __future__ import annotations

import logging
import warnings
from collections import defaultdict
from dataclasses import dataclass, replace
from typing import Dict, Hashable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .datagen import LogRecord
from .errors import DegenerateLabelError, InfeasibleTargetError, MissingSignalError, ShapeError
from .ppct_protocol import GroupLabel

log = logging.getLogger(__name__)

EPS = 1e-6
MAX_SHIFT = 30.0


class CalibrationWarning(UserWarning):
    pass


def sigmoid(t):
    # exp(-softplus(-t)) keeps relative precision deep in the lower tail,
    # where the tanh form rounds to exactly 0 and merges distinct labels
    return np.exp(-np.logaddexp(0.0, -np.asarray(t, dtype=float)))


def logit(p):
    p = np.asarray(p, dtype=float)
    return np.log(p) - np.log1p(-p)


@dataclass(frozen=True)
class LRParams:
    """Weights over post-ranking signals; the last entry is the bias."""

    w: np.ndarray
    l2: float = 1e-4

    def __post_init__(self):
        w = np.asarray(self.w, dtype=float)
        if w.ndim != 1 or w.size < 1:
            raise ShapeError("LR weights must be a non-empty vector")
        if not np.all(np.isfinite(w)):
            raise ValueError("LR weights must be finite")
        object.__setattr__(self, "w", w)

    @property
    def dim(self) -> int:
        return self.w.size - 1

    @property
    def bias(self) -> float:
        return float(self.w[-1])

    def logits(self, xp: np.ndarray) -> np.ndarray:
        xp = np.atleast_2d(np.asarray(xp, dtype=float))
        if xp.shape[1] != self.dim:
            raise ShapeError(f"expected {self.dim} post-ranking columns, got {xp.shape[1]}")
        return xp @ self.w[:-1] + self.w[-1]


@dataclass(frozen=True)
class LRHyper:
    l2: float = 1e-4
    tol: float = 1e-8
    max_iter: int = 50_000
    batch_size: Optional[int] = None  # None = full batch
    learning_rate: Optional[float] = None  # None = 1/L per coordinate block
    seed: int = 0
    allow_constant: bool = False


@dataclass(frozen=True)
class SoftLabel:
    record_id: int
    z_hat: float
    calibrated: bool = False


def _design(xp: np.ndarray) -> np.ndarray:
    return np.hstack([xp, np.ones((xp.shape[0], 1))])


def lr_loss_and_gradient(params: LRParams, xp: np.ndarray, z: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean negative log-likelihood plus ``l2/2 * |w|^2`` (bias unpenalised)."""
    xp = np.atleast_2d(np.asarray(xp, dtype=float))
    z = np.asarray(z, dtype=float).ravel()
    if xp.shape[0] == 0:
        raise ValueError("empty batch")
    if xp.shape[1] != params.dim or z.size != xp.shape[0]:
        raise ShapeError(f"batch of shape {xp.shape} with {z.size} labels does not match {params.dim}-dim params")
    A = _design(xp)
    t = A @ params.w
    # -z log s(t) - (1-z) log(1-s(t)) = softplus(t) - z t
    loss = float(np.mean(np.logaddexp(0.0, t) - z * t))
    grad = A.T @ (sigmoid(t) - z) / z.size
    w = params.w.copy()
    w[-1] = 0.0
    loss += 0.5 * params.l2 * float(w @ w)
    grad = grad + params.l2 * w
    return loss, grad


def _xp_matrix(records: Sequence[LogRecord]) -> np.ndarray:
    for r in records:
        if r.x_prime is None:
            raise MissingSignalError(r.record_id)
    return np.vstack([r.x_prime for r in records])


def fit_lr_arrays(xp: np.ndarray, z: np.ndarray, hyper: LRHyper = LRHyper(), init: Optional[np.ndarray] = None) -> LRParams:
    """Gradient descent on the post-ranking logistic loss.

    Step sizes are the inverse of a per-block Lipschitz bound (data term
    plus l2 for weights, data term only for the bias), which keeps the
    iteration monotone without a line search.
    """
    xp = np.atleast_2d(np.asarray(xp, dtype=float))
    z = np.asarray(z, dtype=float).ravel()
    n_pos = z.sum()
    if n_pos == 0 or n_pos == z.size:
        if not hyper.allow_constant:
            raise DegenerateLabelError(f"all {z.size} labels are {int(z[0]) if z.size else '?'}")
        w = np.zeros(xp.shape[1] + 1)
        w[-1] = float(logit(np.clip(n_pos / z.size, EPS, 1 - EPS)))
        return LRParams(w, hyper.l2)

    A = _design(xp)
    L_data = 0.25 * float(np.linalg.eigvalsh(A.T @ A / A.shape[0])[-1])
    step = np.full(A.shape[1], 1.0 / (L_data + hyper.l2))
    step[-1] = 1.0 / L_data
    if hyper.learning_rate is not None:
        step[:] = hyper.learning_rate

    params = LRParams(np.zeros(A.shape[1]) if init is None else np.array(init, dtype=float), hyper.l2)
    rng = np.random.default_rng(hyper.seed)
    n = A.shape[0]
    for it in range(hyper.max_iter):
        if hyper.batch_size is None or hyper.batch_size >= n:
            _, g = lr_loss_and_gradient(params, xp, z)
        else:
            idx = rng.choice(n, hyper.batch_size, replace=False)
            _, g = lr_loss_and_gradient(params, xp[idx], z[idx])
        if hyper.batch_size is None and np.linalg.norm(g) < hyper.tol:
            break
        params = LRParams(params.w - step * g, hyper.l2)
    else:
        if hyper.batch_size is None:
            log.warning("LR fit stopped at max_iter=%d before reaching tol=%g", hyper.max_iter, hyper.tol)
    return params


def fit_post_ranking_lr(hard: Sequence[LogRecord], hyper: LRHyper = LRHyper(), init: Optional[np.ndarray] = None) -> LRParams:
    """Fit on ``x_prime`` only; ranking features ``x`` are never read."""
    if not hard:
        raise ValueError("no hard-labelled records to fit on")
    rows = sorted(hard, key=lambda r: r.record_id)  # order-independent result
    for r in rows:
        if r.z is None:
            raise ValueError(f"record {r.record_id} has no hard label")
    return fit_lr_arrays(_xp_matrix(rows), np.array([r.z for r in rows], dtype=float), hyper, init)


def impute_soft_labels(unlabeled: Sequence[LogRecord], params: LRParams) -> List[SoftLabel]:
    if not unlabeled:
        return []
    z_hat = np.clip(sigmoid(params.logits(_xp_matrix(unlabeled))), EPS, 1 - EPS)
    return [SoftLabel(r.record_id, float(p)) for r, p in zip(unlabeled, z_hat)]


def solve_logit_shift(z_hat: np.ndarray, target: float, tol: float = 1e-10, max_shift: float = MAX_SHIFT) -> float:
    """Shift ``d`` with ``sum(sigmoid(logit(z_hat) + d)) == target``, by bisection."""
    base = logit(z_hat)

    def excess(d):
        return float(sigmoid(base + d).sum()) - target

    if abs(excess(0.0)) <= tol:
        return 0.0
    lo, hi = -max_shift, max_shift
    if excess(lo) >= 0:
        return lo
    if excess(hi) <= 0:
        return hi
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        e = excess(mid)
        if abs(e) <= tol:
            return mid
        if e < 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def calibrate_soft_labels(
    soft: Sequence[SoftLabel],
    membership: Mapping[int, Hashable],
    groups: Sequence[GroupLabel],
    *,
    level: str = "group",
    strict: bool = True,
) -> List[SoftLabel]:
    """Match each group's soft-label sum to its reported conversion count.

    ``level="group"`` calibrates every (app, token, window) group on its own;
    ``level="token"`` pools the unsuppressed windows of one (app, token).
    With ``strict=False`` targets above the group size are clipped instead
    of raising, which tiling windows can produce through boundary leakage.
    """
    if level not in ("group", "token"):
        raise ValueError(f"unknown calibration level {level!r}")
    by_key = {g.key: g for g in groups}

    def pool_key(k):
        return k if level == "group" else k[:2]

    targets: Dict[Hashable, int] = defaultdict(int)
    sizes: Dict[Hashable, int] = defaultdict(int)
    for g in groups:
        if not g.suppressed:
            targets[pool_key(g.key)] += g.conversions
            sizes[pool_key(g.key)] += g.click_count

    members: Dict[Hashable, List[int]] = defaultdict(list)
    for i, s in enumerate(soft):
        key = membership[s.record_id]
        if key not in by_key:
            raise KeyError(f"soft label {s.record_id} maps to unknown group {key!r}")
        if not by_key[key].suppressed:
            members[pool_key(key)].append(i)

    out = list(soft)
    for key, idx in members.items():
        if len(idx) != sizes[key]:
            raise ValueError(f"group {key!r}: {len(idx)} soft labels but {sizes[key]} clicks")
        n, target = len(idx), targets[key]
        if target > n:
            if strict:
                raise InfeasibleTargetError(f"group {key!r}: {target} conversions reported for {n} clicks")
            target = n
        z = np.array([soft[i].z_hat for i in idx])
        if target == 0 or target == n:
            warnings.warn(
                f"group {key!r}: target {target} of {n} saturates; shift capped at {MAX_SHIFT:g}",
                CalibrationWarning,
                stacklevel=2,
            )
        d = solve_logit_shift(z, float(target))
        new = sigmoid(logit(z) + d) if d != 0.0 else z
        for i, v in zip(idx, new):
            out[i] = replace(soft[i], z_hat=float(v), calibrated=True)
    return out
