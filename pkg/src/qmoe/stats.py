"""Paired t, Levene and Spearman tests with their distribution functions.

Student-t and F tail probabilities come from the regularised incomplete beta
function, evaluated by its continued fraction (modified Lentz). All tests are
two-sided.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DataError, ParameterError

_EPS = 1e-15
_TINY = 1e-300
_MAX_ITER = 500


def _betacf(a, b, x):
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > _TINY else _TINY)
    h = d
    for m in range(1, _MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > _TINY else _TINY)
        c = 1.0 + aa / c
        c = c if abs(c) > _TINY else _TINY
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > _TINY else _TINY)
        c = 1.0 + aa / c
        c = c if abs(c) > _TINY else _TINY
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            return h
    raise ArithmeticError(f"incomplete beta did not converge for a={a}, b={b}, x={x}")


def betainc(a, b, x):
    """Regularised incomplete beta ``I_x(a, b)``."""
    if a <= 0 or b <= 0:
        raise ParameterError("beta parameters must be positive")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(log_front)
    # the fraction converges fast for x < (a + 1) / (a + b + 2); use symmetry otherwise
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_sf_two_sided(t, df):
    """``P(|T| >= |t|)`` for Student's t with ``df`` degrees of freedom."""
    if df <= 0:
        raise ParameterError("degrees of freedom must be positive")
    if math.isinf(t):
        return 0.0
    return float(min(1.0, max(0.0, betainc(df / 2.0, 0.5, df / (df + t * t)))))


def t_cdf(t, df):
    tail = 0.5 * t_sf_two_sided(t, df)
    return 1.0 - tail if t >= 0 else tail


def f_sf(f, d1, d2):
    """Upper tail ``P(F >= f)`` of the F distribution."""
    if d1 <= 0 or d2 <= 0:
        raise ParameterError("degrees of freedom must be positive")
    if f <= 0:
        return 1.0
    if math.isinf(f):
        return 0.0
    return float(min(1.0, max(0.0, betainc(d2 / 2.0, d1 / 2.0, d2 / (d2 + d1 * f)))))


def f_cdf(f, d1, d2):
    return 1.0 - f_sf(f, d1, d2)


def _bisect(func, target, lo, hi, iters=200):
    # func increasing on [lo, hi]
    while func(hi) < target:
        hi *= 2.0
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if func(mid) < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def t_ppf(q, df):
    if not 0.0 < q < 1.0:
        raise ParameterError("quantile must be in (0, 1)")
    if q == 0.5:
        return 0.0
    if q < 0.5:
        return -t_ppf(1.0 - q, df)
    return _bisect(lambda t: t_cdf(t, df), q, 0.0, 10.0)


def f_ppf(q, d1, d2):
    if not 0.0 < q < 1.0:
        raise ParameterError("quantile must be in (0, 1)")
    return _bisect(lambda f: f_cdf(f, d1, d2), q, 0.0, 10.0)


# ---------------------------------------------------------------------------
# tests
# ---------------------------------------------------------------------------


@dataclass
class StatResult:
    test: str  # "paired_t" | "levene" | "spearman"
    statistic: float
    p_value: float
    effect_size: float | None = None
    corrected_alpha: float = 0.05
    df: tuple = ()

    def __post_init__(self):
        if not 0.0 <= self.p_value <= 1.0:
            raise ArithmeticError(f"p-value {self.p_value} outside [0, 1]")

    @property
    def significant(self):
        return self.p_value < self.corrected_alpha

    def verdict(self):
        return "significant" if self.significant else "not significant"

    def to_dict(self):
        return {"test": self.test, "statistic": self.statistic, "p": self.p_value,
                "effect_size": self.effect_size, "corrected_alpha": self.corrected_alpha,
                "verdict": self.verdict()}


def _vector(a, name):
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(a)):
        raise DataError(f"{name} contains non-finite values")
    return a


def cohens_d(diffs):
    d = _vector(diffs, "differences")
    return float(d.mean() / d.std(ddof=1))


def paired_t_test(a, b, alpha=0.05, comparisons=1):
    a, b = _vector(a, "a"), _vector(b, "b")
    if a.size != b.size:
        raise DataError(f"paired samples differ in length: {a.size} vs {b.size}")
    n = a.size
    if n < 2:
        raise DataError("paired t-test needs at least 2 pairs")
    d = a - b
    sd = d.std(ddof=1)
    if sd == 0:
        raise DataError("differences have zero variance; t is undefined")
    t = d.mean() / (sd / math.sqrt(n))
    p = t_sf_two_sided(t, n - 1)
    return StatResult("paired_t", float(t), p, float(d.mean() / sd),
                      bonferroni(alpha, comparisons), (n - 1,))


def levene_test(*groups, alpha=0.05, comparisons=1):
    """Mean-centred Levene test: one-way ANOVA on ``|x_ij - mean_i|``."""
    if len(groups) == 1 and not np.isscalar(groups[0][0]):
        groups = tuple(groups[0])
    if len(groups) < 2:
        raise DataError("Levene's test needs at least two groups")
    gs = [_vector(g, f"group {i}") for i, g in enumerate(groups)]
    for i, g in enumerate(gs):
        if g.size < 2:
            raise DataError(f"group {i} has fewer than 2 samples")
    z = [np.abs(g - g.mean()) for g in gs]
    k = len(z)
    n = sum(g.size for g in z)
    grand = np.concatenate(z).mean()
    between = sum(g.size * (g.mean() - grand) ** 2 for g in z)
    within = sum(np.sum((g - g.mean()) ** 2) for g in z)
    d1, d2 = k - 1, n - k
    if within == 0:
        stat = 0.0 if between == 0 else math.inf
    else:
        stat = (between / d1) / (within / d2)
    p = 1.0 if stat == 0.0 else f_sf(stat, d1, d2)
    return StatResult("levene", float(stat), p, None, bonferroni(alpha, comparisons), (d1, d2))


def rank_average(a):
    """1-based ranks with ties sharing their average rank."""
    a = np.asarray(a, dtype=np.float64)
    order = np.argsort(a, kind="stable")
    ranks = np.empty(a.size)
    sorted_a = a[order]
    i = 0
    while i < a.size:
        j = i
        while j + 1 < a.size and sorted_a[j + 1] == sorted_a[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman_rho(a, b):
    a, b = _vector(a, "a"), _vector(b, "b")
    if a.size != b.size:
        raise DataError("spearman inputs differ in length")
    if a.size < 3:
        raise DataError("spearman needs at least 3 pairs")
    ra, rb = rank_average(a), rank_average(b)
    ra -= ra.mean()
    rb -= rb.mean()
    denom = math.sqrt(float(np.sum(ra * ra) * np.sum(rb * rb)))
    if denom == 0:
        raise DataError("constant input; rho is undefined")
    return max(-1.0, min(1.0, float(np.sum(ra * rb) / denom)))


def spearman_test(a, b, alpha=0.05, comparisons=1):
    """rho with a two-sided p from the t approximation ``t = rho sqrt((n-2)/(1-rho^2))``."""
    rho = spearman_rho(a, b)
    n = np.asarray(a).size
    if abs(rho) == 1.0:
        p = 0.0
    else:
        t = rho * math.sqrt((n - 2) / (1.0 - rho * rho))
        p = t_sf_two_sided(t, n - 2)
    return StatResult("spearman", rho, p, None, bonferroni(alpha, comparisons), (n - 2,))


def bonferroni(alpha, n_comparisons):
    if n_comparisons < 1:
        raise ParameterError("need at least one comparison")
    return alpha / n_comparisons


def stars(p):
    if p < 0.001:
        return "***"
    if p < 0.01:
        return "**"
    if p < 0.05:
        return "*"
    return ""
