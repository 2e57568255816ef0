"""Small statistical checks returning uniform reports."""

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import stats


@dataclass(frozen=True)
class StatReport:
    name: str
    statistic: float
    p_value: Optional[float]
    threshold: float
    passed: bool
    n: int
    skipped: bool = False


def ks_normal(samples, variance, name="ks", alpha=0.01):
    """Kolmogorov-Smirnov test of ``samples`` against ``N(0, variance)``; passes when ``p > alpha``."""
    x = np.asarray(samples, dtype=np.float64)
    if variance <= 0:
        return StatReport(name, float("nan"), None, alpha, False, x.size, skipped=True)
    res = stats.kstest(x, "norm", args=(0.0, math.sqrt(variance)))
    return StatReport(name, float(res.statistic), float(res.pvalue), alpha, bool(res.pvalue > alpha), x.size)


def mean_within_se(samples, target, k=3.0, name="mean"):
    """Pass when ``|mean - target| <= k * standard error``; statistic is the z-score."""
    x = np.asarray(samples, dtype=np.float64)
    mean = float(np.mean(x))
    se = float(np.std(x, ddof=1) / math.sqrt(x.size))
    z = (mean - target) / se if se > 0 else (0.0 if mean == target else math.inf)
    return StatReport(name, z, None, k, bool(abs(z) <= k), x.size)


def binomial_se(p, n):
    return math.sqrt(max(p * (1.0 - p), 0.0) / n)


def qq_pairs(samples, variance):
    """Sorted samples against matching normal quantiles at plotting positions ``(i - 0.5) / n``."""
    x = np.sort(np.asarray(samples, dtype=np.float64))
    n = x.size
    probs = (np.arange(1, n + 1) - 0.5) / n
    return x, stats.norm.ppf(probs) * math.sqrt(max(variance, 0.0))
