"""Ranking and calibration metrics used for early stopping and reporting."""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .errors import UndefinedMetricError


def pr_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Area under the precision-recall curve as a step sum.

    Scores are visited in descending order; all rows sharing a score enter
    at the same threshold, so the result does not depend on input order.
    """
    s = np.asarray(scores, dtype=float).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError(f"scores and labels differ in length: {s.size} vs {y.size}")
    if s.size == 0:
        raise UndefinedMetricError("PR-AUC of an empty input")
    y = y.astype(bool)
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == y.size:
        raise UndefinedMetricError("PR-AUC needs at least one positive and one negative label")

    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    tp = np.cumsum(y)
    fp = np.cumsum(~y)
    # last index of each run of tied scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp, fp = tp[ends], fp[ends]
    prev_tp = np.r_[0, tp[:-1]]
    terms = (tp - prev_tp) / n_pos * (tp / (tp + fp))
    return math.fsum(terms.tolist())


def calibration_error(scores: Sequence[float], labels: Sequence[float], n_bins: int = 10) -> float:
    """Expected calibration error over equal-width bins on [0, 1]."""
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    s = np.asarray(scores, dtype=float).ravel()
    y = np.asarray(labels, dtype=float).ravel()
    if s.size == 0:
        raise UndefinedMetricError("calibration error of an empty input")
    if s.shape != y.shape:
        raise ValueError(f"scores and labels differ in length: {s.size} vs {y.size}")
    idx = np.clip((s * n_bins).astype(int), 0, n_bins - 1)
    count = np.bincount(idx, minlength=n_bins)
    sum_s = np.bincount(idx, weights=s, minlength=n_bins)
    sum_y = np.bincount(idx, weights=y, minlength=n_bins)
    nz = count > 0
    gaps = np.abs(sum_s[nz] - sum_y[nz])  # |bin| * |mean score - positive rate|
    return float(gaps.sum() / s.size)


def impression_value(bid_per_conversion: float, p_click: float, p_conv: float) -> float:
    """Expected value of one impression: bid x P(conversion | click) x P(click)."""
    if bid_per_conversion < 0:
        raise ValueError("bid_per_conversion must be >= 0")
    for name, p in (("p_click", p_click), ("p_conv", p_conv)):
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"{name} must lie in [0, 1], got {p}")
    return bid_per_conversion * p_conv * p_click
