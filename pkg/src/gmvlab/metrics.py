"""Regression metrics (pairwise AUC, ACC@20%, ALPR) and dataset analyses."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from numba import njit

from .core import SECONDS_PER_HOUR, ClickSample, final_label

ALPR_EPS = 1e-6
ACC_TOLERANCE = 0.2
KS_TERMS = 100


@njit(cache=True)
def _pair_counts(pred_rank, label_group_starts):
    """Concordant and prediction-tied pair counts between distinct label groups.

    Rows are sorted by label; ``pred_rank`` holds dense prediction ranks
    (1-based). A Fenwick tree accumulates ranks of all rows with a smaller
    label.
    """
    n = pred_rank.shape[0]
    size = 0
    for i in range(n):
        if pred_rank[i] > size:
            size = pred_rank[i]
    tree = np.zeros(size + 1, dtype=np.int64)
    concordant = 0
    tied = 0
    n_groups = label_group_starts.shape[0] - 1
    for g in range(n_groups):
        lo = label_group_starts[g]
        hi = label_group_starts[g + 1]
        for i in range(lo, hi):
            k = pred_rank[i]
            below = 0
            j = k - 1
            while j > 0:
                below += tree[j]
                j -= j & -j
            upto = 0
            j = k
            while j > 0:
                upto += tree[j]
                j -= j & -j
            concordant += below
            tied += upto - below
        for i in range(lo, hi):
            j = pred_rank[i]
            while j <= size:
                tree[j] += 1
                j += j & -j
    return concordant, tied


def regression_auc(preds, labels) -> Optional[float]:
    """Share of label-distinct pairs ordered the same way by the predictions.

    Prediction ties count one half; pairs with equal labels are left out.
    Returns None when every label is equal (no comparable pair).
    """
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if preds.shape != labels.shape or preds.ndim != 1 or preds.size < 2:
        raise ValueError("need two equal-length 1-D arrays with at least 2 entries")
    order = np.lexsort((preds, labels))
    y = labels[order]
    _, rank = np.unique(preds[order], return_inverse=True)
    starts = np.flatnonzero(np.r_[True, y[1:] != y[:-1], True])
    sizes = np.diff(starts)
    n = preds.size
    total = n * (n - 1) // 2 - int(np.sum(sizes * (sizes - 1) // 2))
    if total == 0:
        return None
    concordant, tied = _pair_counts(rank.astype(np.int64) + 1, starts.astype(np.int64))
    return (concordant + 0.5 * tied) / total


def acc_at_20(preds, labels) -> float:
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if np.any(labels <= 0):
        raise ValueError("ACC needs strictly positive labels")
    return float(np.mean(np.abs(preds - labels) / np.abs(labels) <= ACC_TOLERANCE))


def alpr_details(preds, labels) -> Tuple[float, int]:
    """Mean |log2(pred / label)| and the number of zero predictions clamped to ALPR_EPS."""
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if np.any(preds < 0) or np.any(labels <= 0):
        raise ValueError("ALPR needs nonnegative predictions and positive labels")
    zero = preds == 0
    safe = np.where(zero, ALPR_EPS, preds)
    return float(np.mean(np.abs(np.log2(safe / labels)))), int(zero.sum())


def alpr(preds, labels) -> float:
    return alpr_details(preds, labels)[0]


@dataclass
class MetricsReport:
    auc: Optional[float]
    acc: float
    alpr: float
    n_samples: int
    n_clamped: int = 0

    @classmethod
    def compute(cls, preds, labels) -> "MetricsReport":
        value, clamped = alpr_details(preds, labels)
        return cls(regression_auc(preds, labels), acc_at_20(preds, labels), value,
                   len(preds), clamped)


# --- analyses -------------------------------------------------------------------

def hourly_gmv_curve(samples: Sequence[ClickSample]) -> np.ndarray:
    """Mean final GMV per click hour-of-day; NaN marks hours without clicks."""
    sums = np.zeros(24)
    counts = np.zeros(24, dtype=np.int64)
    for s in samples:
        sums[s.hour] += final_label(s)
        counts[s.hour] += 1
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)


def default_tau_grid(window_seconds: int) -> np.ndarray:
    return np.arange(0, window_seconds + 1, SECONDS_PER_HOUR, dtype=np.int64)


def cumulative_fraction_curve(samples: Sequence[ClickSample], taus) -> np.ndarray:
    """Mean over samples of y(t_click + tau) / y* at each offset tau (seconds)."""
    taus = np.asarray(taus, dtype=np.int64)
    if not samples:
        raise ValueError("need at least one sample")
    acc = np.zeros(taus.size)
    for s in samples:
        offsets = np.array([p.ts - s.click_ts for p in s.purchases])
        cum = np.cumsum([p.price for p in s.purchases])
        total = final_label(s)
        seen = np.searchsorted(offsets, taus, side="right")
        frac = np.where(seen > 0, cum[np.maximum(seen - 1, 0)] / total, 0.0)
        frac[seen == len(offsets)] = 1.0
        acc += frac
    return acc / len(samples)


def kolmogorov_sf(lam: float, terms: int = KS_TERMS) -> float:
    """P(K > lam) for the limiting Kolmogorov distribution."""
    if lam <= 0:
        return 1.0
    if lam < 1.0:
        # theta-function form converges quickly for small arguments
        s = sum(math.exp(-((2 * k - 1) ** 2) * math.pi ** 2 / (8 * lam * lam))
                for k in range(1, terms + 1))
        cdf = math.sqrt(2 * math.pi) / lam * s
        return min(1.0, max(0.0, 1.0 - cdf))
    s = sum((-1) ** (k - 1) * math.exp(-2 * k * k * lam * lam) for k in range(1, terms + 1))
    return min(1.0, max(0.0, 2.0 * s))


def ks_two_sample(a, b) -> Tuple[float, float]:
    """Two-sample KS statistic and its asymptotic p-value."""
    a = np.sort(np.asarray(a, dtype=np.float64))
    b = np.sort(np.asarray(b, dtype=np.float64))
    if a.size == 0 or b.size == 0:
        raise ValueError("both samples must be nonempty")
    pooled = np.concatenate([a, b])
    cdf_a = np.searchsorted(a, pooled, side="right") / a.size
    cdf_b = np.searchsorted(b, pooled, side="right") / b.size
    d = float(np.max(np.abs(cdf_a - cdf_b)))
    n_eff = a.size * b.size / (a.size + b.size)
    return d, kolmogorov_sf(math.sqrt(n_eff) * d)


@dataclass
class DistributionComparison:
    edges: np.ndarray
    count_single: np.ndarray
    count_repurchase: np.ndarray
    ks_statistic: float
    p_value: float
    n_single: int
    n_repurchase: int


def compare_purchase_types(samples: Sequence[ClickSample], n_bins: int = 40) -> DistributionComparison:
    """Histogram final GMV of single vs repurchase clicks on a log grid, plus a KS test."""
    single = np.array([final_label(s) for s in samples if not s.is_repurchase])
    repeat = np.array([final_label(s) for s in samples if s.is_repurchase])
    pooled = np.concatenate([single, repeat])
    if pooled.size == 0:
        raise ValueError("need at least one sample")
    lo, hi = pooled.min(), pooled.max()
    edges = np.geomspace(lo, hi, n_bins + 1) if hi > lo else np.array([lo, lo * (1 + 1e-9) + 1e-12])
    cs, _ = np.histogram(single, bins=edges)
    cr, _ = np.histogram(repeat, bins=edges)
    if single.size and repeat.size:
        d, p = ks_two_sample(single, repeat)
    else:
        d, p = float("nan"), float("nan")
    return DistributionComparison(edges, cs, cr, d, p, int(single.size), int(repeat.size))
