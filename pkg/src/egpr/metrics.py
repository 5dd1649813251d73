"""Out-of-sample prediction metrics and diagnostics.

R-squared values are measured against the zero forecast, not the historical
mean. Per-month inputs are sequences of equally long (prediction, realized)
arrays, one pair per month.
"""

import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy import stats

from .exceptions import UndefinedMetricError

__all__ = [
    "MonthlyScore",
    "r2_pool",
    "r2_month",
    "r2_avg",
    "spearman",
    "information_coefficient",
    "ic_ttest",
    "OLSResult",
    "ols_simple",
    "decile_sizes",
    "decile_labels",
    "decile_copula",
    "score_months",
    "expanding_r2",
]

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MonthlyScore:
    month_id: int
    r2_t: float
    rho_t: float
    n: int


def _pairs(predictions, realized):
    if isinstance(predictions, np.ndarray) and predictions.ndim == 1:
        predictions, realized = [predictions], [realized]
    pairs = []
    for p, r in zip(predictions, realized, strict=True):
        p = np.asarray(p, dtype=np.float64)
        r = np.asarray(r, dtype=np.float64)
        if p.shape != r.shape:
            raise ValueError(f"prediction/realized shape mismatch {p.shape} vs {r.shape}")
        pairs.append((p, r))
    if not pairs:
        raise ValueError("no months supplied")
    return pairs


def r2_pool(predictions, realized):
    pairs = _pairs(predictions, realized)
    num = sum(float(np.sum((r - p) ** 2)) for p, r in pairs)
    den = sum(float(np.sum(r**2)) for _, r in pairs)
    if den == 0:
        raise UndefinedMetricError("pooled R^2 undefined: realized returns are all zero")
    return 1.0 - num / den


def r2_month(prediction, realized):
    return r2_pool([prediction], [realized])


def r2_avg(predictions, realized):
    """Mean of monthly R^2; months whose realized returns are all zero are skipped."""
    values = []
    for i, (p, r) in enumerate(_pairs(predictions, realized)):
        try:
            values.append(r2_month(p, r))
        except UndefinedMetricError:
            logger.warning("r2_avg: month %d has zero denominator, excluded", i)
    if not values:
        raise UndefinedMetricError("average R^2 undefined: every month has zero denominator")
    return float(np.mean(values))


def spearman(a, b):
    """Pearson correlation of average ranks (the d_i^2 formula when there are no ties)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("spearman needs two vectors of equal length")
    if a.size < 2:
        raise UndefinedMetricError("rank correlation needs at least two observations")
    ra = stats.rankdata(a) - (a.size + 1) / 2.0
    rb = stats.rankdata(b) - (b.size + 1) / 2.0
    den = np.sqrt(np.sum(ra**2) * np.sum(rb**2))
    if den == 0:
        raise UndefinedMetricError("rank correlation undefined for a constant series")
    return float(np.clip(np.sum(ra * rb) / den, -1.0, 1.0))


def information_coefficient(predictions, realized):
    """Time average of monthly Spearman correlations; returns ``(ic, rho_series)``."""
    rhos = np.array([spearman(p, r) for p, r in _pairs(predictions, realized)])
    return float(rhos.mean()), rhos


def ic_ttest(rhos):
    """One-sample t-test of the mean monthly rank correlation against zero.

    Returns ``(t_stat, one_sided_p)`` for the alternative ``IC > 0``.
    """
    rhos = np.asarray(rhos, dtype=np.float64)
    if rhos.size < 2:
        raise UndefinedMetricError("t-test needs at least two months")
    sd = rhos.std(ddof=1)
    if sd == 0:
        raise UndefinedMetricError("t-test undefined for a constant series")
    t = rhos.mean() / (sd / np.sqrt(rhos.size))
    return float(t), float(stats.t.sf(t, df=rhos.size - 1))


@dataclass(frozen=True)
class OLSResult:
    slope: float
    intercept: float
    se_slope: float
    se_intercept: float
    n: int


def ols_simple(y, x):
    """``y = intercept + slope x`` by least squares with homoskedastic standard errors."""
    y = np.asarray(y, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if y.shape != x.shape or y.ndim != 1:
        raise ValueError("ols_simple needs two vectors of equal length")
    n = y.size
    if n < 3:
        raise UndefinedMetricError("OLS standard errors need at least three observations")
    xm, ym = x.mean(), y.mean()
    sxx = np.sum((x - xm) ** 2)
    if sxx == 0:
        raise UndefinedMetricError("regressor is constant")
    slope = np.sum((x - xm) * (y - ym)) / sxx
    intercept = ym - slope * xm
    resid = y - intercept - slope * x
    s2 = np.sum(resid**2) / (n - 2)
    se_slope = np.sqrt(s2 / sxx)
    se_intercept = np.sqrt(s2 * (1.0 / n + xm**2 / sxx))
    return OLSResult(float(slope), float(intercept), float(se_slope), float(se_intercept), n)


def decile_sizes(n, n_bins=10):
    """Bin sizes ``n // n_bins``, the remainder spread one each from the top bin down."""
    base, rem = divmod(n, n_bins)
    return np.array([base + (1 if b >= n_bins - rem else 0) for b in range(n_bins)])


def decile_labels(values, n_bins=10):
    """Labels 1..n_bins by ascending value; a tie straddling a boundary takes the lower bin."""
    values = np.asarray(values, dtype=np.float64)
    n = values.size
    order = np.argsort(values, kind="stable")
    sorted_labels = np.repeat(np.arange(1, n_bins + 1), decile_sizes(n, n_bins))
    labels = np.empty(n, dtype=int)
    labels[order] = sorted_labels
    sv = values[order]
    start = 0
    for i in range(1, n + 1):
        if i == n or sv[i] != sv[start]:
            if i - start > 1:
                labels[order[start:i]] = sorted_labels[start]
            start = i
    return labels


def decile_copula(a_months, b_months, n_bins=10):
    """Time-averaged joint decile frequencies: entry (i, j) = P(a in bin i, b in bin j)."""
    mats = []
    for a, b in zip(a_months, b_months, strict=True):
        la = decile_labels(a, n_bins) - 1
        lb = decile_labels(b, n_bins) - 1
        m = np.zeros((n_bins, n_bins))
        np.add.at(m, (la, lb), 1.0)
        mats.append(m / la.size)
    if not mats:
        raise ValueError("no months supplied")
    return np.mean(mats, axis=0)


def score_months(months, predictions, realized):
    """Per-month R^2, Spearman and cross-section size as a DataFrame."""
    rows = []
    for m, (p, r) in zip(months, _pairs(predictions, realized), strict=True):
        try:
            r2 = r2_month(p, r)
        except UndefinedMetricError:
            r2 = None
        try:
            rho = spearman(p, r)
        except UndefinedMetricError:
            rho = None
        rows.append(MonthlyScore(int(m), r2, rho, int(p.size)))
    return pd.DataFrame([s.__dict__ for s in rows])


def expanding_r2(months, predictions, realized):
    """R^2_pool and R^2_avg evaluated on every expanding prefix of the test months."""
    num = den = 0.0
    r2s = []
    out = []
    for m, (p, r) in zip(months, _pairs(predictions, realized), strict=True):
        num += float(np.sum((r - p) ** 2))
        d = float(np.sum(r**2))
        den += d
        if d > 0:
            r2s.append(1.0 - float(np.sum((r - p) ** 2)) / d)
        out.append({"month_id": int(m),
                    "r2_pool": 1.0 - num / den if den > 0 else None,
                    "r2_avg": float(np.mean(r2s)) if r2s else None})
    return pd.DataFrame(out)
