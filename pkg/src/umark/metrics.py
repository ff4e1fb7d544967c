"""Segmentation and verification metrics."""

from __future__ import annotations

import math

import numpy as np
from scipy.stats import rankdata

P_FLOOR = 1e-13


class ShapeMismatch(ValueError):
    pass


class OneClassOnly(ValueError):
    pass


class ZeroTotal(ValueError):
    pass


class DegenerateMargins(ValueError):
    pass


def _pair(pred, gt):
    a = np.asarray(pred).astype(bool)
    b = np.asarray(gt).astype(bool)
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    return a, b


def dice(pred, gt) -> float:
    """2|A n B| / (|A| + |B|); 1.0 when both masks are empty."""
    a, b = _pair(pred, gt)
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / denom


def volume_similarity(pred, gt) -> float:
    a, b = _pair(pred, gt)
    vp, vg = int(a.sum()), int(b.sum())
    if vp + vg == 0:
        return 1.0
    return 1.0 - abs(vp - vg) / (vp + vg)


def auc(scores, labels) -> float:
    """Mann-Whitney AUC; tied scores count one half."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise OneClassOnly("AUC needs at least one positive and one negative")
    ranks = rankdata(s)  # average ranks handle ties
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def asr(successes: int, total: int) -> float:
    if total <= 0:
        raise ZeroTotal("ASR needs at least one attempt")
    return successes / total


def chi_squared_stat(table) -> float:
    obs = np.asarray(table, dtype=np.float64)
    if obs.shape != (2, 2) or np.any(obs < 0):
        raise ValueError("need a 2x2 table of non-negative counts")
    rows = obs.sum(axis=1)
    cols = obs.sum(axis=0)
    total = obs.sum()
    if total == 0 or np.any(rows == 0) or np.any(cols == 0):
        raise DegenerateMargins(f"zero margin in {obs.tolist()}")
    expected = np.outer(rows, cols) / total
    return float(np.sum((obs - expected) ** 2 / expected))


def chi_squared_p(table) -> float:
    """Pearson chi-squared independence p-value (1 dof), floored at 1e-13.

    The 1-dof survival function is Q(1/2, x/2) = erfc(sqrt(x/2)).
    """
    x = chi_squared_stat(table)
    return max(math.erfc(math.sqrt(x / 2.0)), P_FLOOR)
