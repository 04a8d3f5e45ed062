"""Rank and linear correlation between predicted and labeled scores.

The rank correlation is Pearson applied to tie-averaged ranks, which stays
exact under ties (the 1 - 6*sum(d^2)/(n(n^2-1)) shortcut does not).
"""
from __future__ import annotations

import numpy as np


class UndefinedCorrelationError(ValueError):
    """Raised when a side has zero variance (correlation undefined)."""


def rank_average_ties(values) -> np.ndarray:
    """Fractional ranks 1..n; tied values share the mean of their rank span."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or v.size < 1:
        raise ValueError("rank_average_ties needs a non-empty 1D sequence")
    order = np.argsort(v, kind="stable")
    ranks = np.empty(v.size, dtype=np.float64)
    i = 0
    while i < v.size:
        j = i
        while j + 1 < v.size and v[order[j + 1]] == v[order[i]]:
            j += 1
        # positions i..j (0-based) share ranks i+1..j+1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _check_pairs(predictions, labels) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(predictions, dtype=np.float64)
    l = np.asarray(labels, dtype=np.float64)
    if p.ndim != 1 or l.ndim != 1 or p.size != l.size:
        raise ValueError(f"predictions/labels must be equal-length 1D, got {p.shape} vs {l.shape}")
    if p.size < 2:
        raise ValueError("correlation needs at least 2 pairs")
    return p, l


def plcc(predictions, labels) -> float:
    """Pearson product-moment correlation."""
    p, l = _check_pairs(predictions, labels)
    pc = p - p.mean()
    lc = l - l.mean()
    denom = np.sqrt((pc * pc).sum()) * np.sqrt((lc * lc).sum())
    if denom == 0.0:
        raise UndefinedCorrelationError("zero variance on one side; correlation undefined")
    return float((pc * lc).sum() / denom)


def srcc(predictions, labels) -> float:
    """Spearman rank correlation: Pearson on tie-averaged ranks."""
    p, l = _check_pairs(predictions, labels)
    return plcc(rank_average_ties(p), rank_average_ties(l))
