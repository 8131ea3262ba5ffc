"""Small estimators with standard errors used by the analyses and tests."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np
from scipy import stats


class Estimate(NamedTuple):
    value: float
    se: float

    def z(self, target: float = 0.0) -> float:
        """Signed distance to ``target`` in standard errors."""
        if self.se == 0:
            return 0.0 if self.value == target else np.inf * np.sign(self.value - target)
        return (self.value - target) / self.se


def mean_se(x) -> Estimate:
    x = np.asarray(x, dtype=float)
    n = x.size
    if n < 2:
        raise ValueError("need at least two samples")
    return Estimate(float(x.mean()), float(x.std(ddof=1) / np.sqrt(n)))


def variance_se(x) -> Estimate:
    """Unbiased sample variance and its standard error from the fourth central moment."""
    x = np.asarray(x, dtype=float)
    n = x.size
    if n < 4:
        raise ValueError("need at least four samples")
    d = x - x.mean()
    s2 = float(d @ d / (n - 1))
    m4 = float(np.mean(d**4))
    var_s2 = (m4 - s2**2 * (n - 3) / (n - 1)) / n
    return Estimate(s2, float(np.sqrt(max(var_s2, 0.0))))


def grouped_variance_se(table) -> Estimate:
    """Variance of all entries of a (groups, replicas) table, jackknifed over whole groups.

    Entries inside a group share a disorder sample and are not independent, so
    the standard error comes from deleting one group at a time.
    """
    t = np.asarray(table, dtype=float)
    if t.ndim != 2 or t.shape[0] < 2:
        raise ValueError("need a (groups >= 2, replicas) table")
    g = t.shape[0]
    full = float(np.var(t, ddof=1))
    if t.shape[1] == 1:
        return variance_se(t[:, 0])
    n_sub = (g - 1) * t.shape[1]
    tot = t.sum()
    tot2 = (t**2).sum()
    s1 = tot - t.sum(axis=1)
    s2 = tot2 - (t**2).sum(axis=1)
    loo = (s2 - s1**2 / n_sub) / (n_sub - 1)
    se = np.sqrt((g - 1) / g * np.sum((loo - loo.mean()) ** 2))
    return Estimate(full, float(se))


def covariance_se(x, y) -> Estimate:
    """Sample covariance with a delta-method standard error."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n = x.size
    dx, dy = x - x.mean(), y - y.mean()
    prod = dx * dy
    c = float(prod.sum() / (n - 1))
    return Estimate(c, float(prod.std(ddof=1) / np.sqrt(n)))


class LogLogFit(NamedTuple):
    slope: float
    slope_se: float
    intercept: float
    r_value: float


def loglog_fit(x, y) -> LogLogFit:
    """Ordinary least squares of log y on log x."""
    res = stats.linregress(np.log(np.asarray(x, dtype=float)), np.log(np.asarray(y, dtype=float)))
    return LogLogFit(float(res.slope), float(res.stderr), float(res.intercept), float(res.rvalue))


class Anova(NamedTuple):
    """One-way random-effects decomposition of a (groups, replicas) table."""

    grand_mean: Estimate
    between_var: Estimate  # variance component of the group means
    within_var: float
    group_means: np.ndarray


def one_way_anova(table) -> Anova:
    """Between-group variance component (MS_B - MS_W)/n with a normal-theory standard error.

    The grand mean's standard error uses the spread of group means, which is
    the correct unit when groups (disorder samples) are the independent draws.
    """
    t = np.asarray(table, dtype=float)
    if t.ndim != 2 or t.shape[0] < 2:
        raise ValueError("need a (groups >= 2, replicas) table")
    g, n = t.shape
    means = t.mean(axis=1)
    grand = mean_se(means)
    ms_b = n * float(np.var(means, ddof=1))
    if n > 1:
        ms_w = float(np.sum((t - means[:, None]) ** 2) / (g * (n - 1)))
        var_ms_w = 2.0 * ms_w**2 / (g * (n - 1))
    else:
        ms_w, var_ms_w = 0.0, 0.0
    comp = (ms_b - ms_w) / n
    se = np.sqrt(2.0 * ms_b**2 / (g - 1) + var_ms_w) / n
    return Anova(grand, Estimate(float(comp), float(se)), ms_w, means)


def ks_normal(x, var: float, mean: float = 0.0) -> tuple[float, float]:
    """Kolmogorov-Smirnov statistic and p-value against N(mean, var)."""
    res = stats.kstest(np.asarray(x, dtype=float), "norm", args=(mean, np.sqrt(var)))
    return float(res.statistic), float(res.pvalue)
