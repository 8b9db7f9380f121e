"""Rank and correlation statistics used by agreement scoring and evaluation.

Everything here is self-contained (no scipy) so the test suite can pair each
routine against an independent reference implementation.
"""

from __future__ import annotations

from math import exp, lgamma, log, sqrt

import numpy as np


def rank_average(values) -> np.ndarray:
    """Ranks 1..n with tied values sharing the average of their positions."""
    v = np.asarray(values, dtype=np.float64)
    order = np.argsort(v, kind="stable")
    ranks = np.empty(v.size, dtype=np.float64)
    i = 0
    while i < v.size:
        j = i
        while j + 1 < v.size and v[order[j + 1]] == v[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the regularized incomplete beta (Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, 300):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 3e-15:
            break
    return h


def betainc_reg(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = lgamma(a + b) - lgamma(a) - lgamma(b) + a * log(x) + b * log(1.0 - x)
    front = exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_two_sided_p(t: float, df: float) -> float:
    """P(|T| >= |t|) for Student's t with df degrees of freedom."""
    if df <= 0:
        raise ValueError("degrees of freedom must be positive")
    return betainc_reg(0.5 * df, 0.5, df / (df + t * t))


def student_t_one_sided_p(t: float, df: float) -> float:
    """P(T >= t); the upper tail."""
    p = 0.5 * student_t_two_sided_p(t, df)
    return p if t >= 0 else 1.0 - p


def pearson(x, y) -> tuple[float, float]:
    """Correlation r and two-sided p from t = r * sqrt((n-2)/(1-r^2))."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("pearson expects two equally sized 1D arrays")
    n = x.size
    if n < 3:
        raise ValueError(f"pearson needs n >= 3, got {n}")
    xm = x - x.mean()
    ym = y - y.mean()
    sx = float(xm @ xm)
    sy = float(ym @ ym)
    if sx == 0.0 or sy == 0.0:
        raise ValueError("pearson undefined for constant input")
    r = float(xm @ ym) / sqrt(sx * sy)
    r = max(-1.0, min(1.0, r))
    if abs(r) == 1.0:
        return r, 0.0
    t = r * sqrt((n - 2) / (1.0 - r * r))
    return r, student_t_two_sided_p(t, n - 2)


def spearman(a, b) -> float:
    """Spearman rho: Pearson correlation of tie-averaged ranks."""
    ra = rank_average(a)
    rb = rank_average(b)
    if np.all(ra == ra[0]) or np.all(rb == rb[0]):
        raise ValueError("spearman undefined when one input is entirely tied")
    ram = ra - ra.mean()
    rbm = rb - rb.mean()
    return float(ram @ rbm) / sqrt(float(ram @ ram) * float(rbm @ rbm))


def roc_auc(labels, scores) -> float:
    """Rank-based (Mann-Whitney) AUC; ties in scores earn half credit."""
    y = np.asarray(labels)
    s = np.asarray(scores, dtype=np.float64)
    if y.shape != s.shape or y.ndim != 1:
        raise ValueError("roc_auc expects two equally sized 1D arrays")
    n_pos = int(np.sum(y == 1))
    n_neg = int(np.sum(y == 0))
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_auc undefined with a single class")
    ranks = rank_average(s)
    pos_rank_sum = float(ranks[y == 1].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def paired_one_sided_t(diffs) -> tuple[float, float]:
    """Mean(diffs) > 0 test: returns (t, one-sided p)."""
    d = np.asarray(diffs, dtype=np.float64)
    n = d.size
    if n < 2:
        raise ValueError("paired test needs n >= 2")
    sd = d.std(ddof=1)
    if sd == 0.0:
        raise ValueError("paired test undefined for constant differences")
    t = d.mean() / (sd / sqrt(n))
    return t, student_t_one_sided_p(t, n - 1)
