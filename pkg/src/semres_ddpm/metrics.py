"""Evaluation metrics and rank statistics.

Positive = minority class everywhere.  Mean ranks use the "higher is
better" orientation: the best method on a dataset gets rank k.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fn: int
    fp: int
    tn: int


def confusion(y_true, y_pred) -> ConfusionMatrix:
    y_true = np.asarray(y_true).astype(bool)
    y_pred = np.asarray(y_pred).astype(bool)
    if y_true.shape != y_pred.shape:
        raise ValueError("y_true and y_pred differ in length")
    if y_true.size == 0:
        raise ValueError("empty input")
    return ConfusionMatrix(int(np.sum(y_true & y_pred)), int(np.sum(y_true & ~y_pred)),
                           int(np.sum(~y_true & y_pred)), int(np.sum(~y_true & ~y_pred)))


def f1(cm: ConfusionMatrix) -> float:
    if cm.tp == 0:
        return 0.0
    p = cm.tp / (cm.tp + cm.fp)
    r = cm.tp / (cm.tp + cm.fn)
    return 2 * p * r / (p + r)


def g_mean(cm: ConfusionMatrix) -> float:
    if cm.tp + cm.fn == 0 or cm.tn + cm.fp == 0:
        raise ValueError("g_mean needs both classes present in y_true")
    tpr = cm.tp / (cm.tp + cm.fn)
    tnr = cm.tn / (cm.tn + cm.fp)
    return math.sqrt(tpr * tnr)


def auc(scores, y_true) -> float:
    """Mann-Whitney AUC via the rank-sum identity (ties get average ranks)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(y_true).astype(bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auc needs both classes present")
    r = rankdata(s)
    return float((r[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def psnr(reference, test, max_value: float = 1.0) -> float:
    a = np.asarray(reference, dtype=np.float64)
    b = np.asarray(test, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(max_value ** 2 / mse)


def pearson(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise ValueError("pearson needs two 1-D arrays of equal length >= 2")
    da, db = a - a.mean(), b - b.mean()
    sa, sb = math.sqrt(np.dot(da, da)), math.sqrt(np.dot(db, db))
    if sa == 0 or sb == 0:
        raise ValueError("pearson undefined for zero-variance input")
    return float(np.clip(np.dot(da, db) / (sa * sb), -1.0, 1.0))


def quantile_pearson(real, synth, n_points: int | None = None) -> float:
    """Pearson between sorted real and sorted synthetic values.

    Both sorted vectors are linearly resampled onto a common grid of
    ``n_points`` quantile levels (default: the longer length).
    """
    r = np.sort(np.asarray(real, dtype=np.float64))
    s = np.sort(np.asarray(synth, dtype=np.float64))
    m = n_points or max(len(r), len(s))
    q = np.linspace(0, 1, m)
    rq = np.interp(q, np.linspace(0, 1, len(r)), r)
    sq = np.interp(q, np.linspace(0, 1, len(s)), s)
    return pearson(rq, sq)


@dataclass
class RankTable:
    values: np.ndarray  # N x k
    ranks: np.ndarray  # N x k, best = k
    methods: list[str]

    @property
    def mean_ranks(self) -> np.ndarray:
        return self.ranks.mean(axis=0)

    @property
    def N(self) -> int:
        return self.values.shape[0]

    @property
    def k(self) -> int:
        return self.values.shape[1]

    def as_dict(self) -> dict:
        return dict(zip(self.methods, (float(r) for r in self.mean_ranks)))


def mean_ranks(matrix, higher_better: bool = True, methods: list[str] | None = None) -> RankTable:
    M = np.asarray(matrix, dtype=np.float64)
    if M.ndim != 2 or M.size == 0:
        raise ValueError("need a non-empty N x k matrix")
    if not np.all(np.isfinite(M)):
        raise ValueError("metric matrix contains missing or non-finite cells")
    ranks = rankdata(M if higher_better else -M, axis=1)
    methods = list(methods) if methods is not None else [f"m{j}" for j in range(M.shape[1])]
    if len(methods) != M.shape[1]:
        raise ValueError("method names do not match column count")
    return RankTable(M, ranks, methods)


# regularized incomplete gamma, series + Lentz continued fraction
def _gamma_p_series(a: float, x: float) -> float:
    term = total = 1.0 / a
    ap = a
    for _ in range(1000):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * 1e-16:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _gamma_q_cf(a: float, x: float) -> float:
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, 1000):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        d = tiny if abs(d) < tiny else d
        c = b + an / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            break
    return h * math.exp(-x + a * math.log(x) - math.lgamma(a))


def chi2_survival(x: float, df: int) -> float:
    """Upper tail P(X >= x) of a chi-square with ``df`` degrees of freedom."""
    if x < 0 or df < 1:
        raise ValueError("need x >= 0 and df >= 1")
    if x == 0:
        return 1.0
    a, z = df / 2.0, x / 2.0
    if z < a + 1.0:
        return max(0.0, 1.0 - _gamma_p_series(a, z))
    return _gamma_q_cf(a, z)


def friedman(table: RankTable) -> tuple[float, float]:
    N, k = table.N, table.k
    if N < 2 or k < 3:
        raise ValueError("friedman needs N >= 2 datasets and k >= 3 methods")
    R = table.mean_ranks
    chi2 = 12.0 * N / (k * (k + 1)) * (np.sum(R ** 2) - k * (k + 1) ** 2 / 4.0)
    chi2 = max(float(chi2), 0.0)  # round-off can dip below zero on all-tied tables
    return chi2, chi2_survival(chi2, k - 1)


# two-tailed alpha=0.05 studentized range / sqrt(2), k = 2..10
NEMENYI_Q05 = {2: 1.960, 3: 2.343, 4: 2.569, 5: 2.728, 6: 2.850, 7: 2.949,
               8: 3.031, 9: 3.102, 10: 3.164}


def nemenyi_cd(k: int, N: int, alpha: float = 0.05) -> float:
    if alpha != 0.05:
        raise ValueError("only alpha=0.05 constants are embedded")
    if k not in NEMENYI_Q05:
        raise ValueError(f"k={k} outside the embedded table (2..10)")
    if N < 1:
        raise ValueError("N must be >= 1")
    return NEMENYI_Q05[k] * math.sqrt(k * (k + 1) / (6.0 * N))
