"""Gaussian-mixture aggregation of per-month GP posteriors.

For weights ``w_j`` and component moments ``(m_j, k_j)`` the mixture has

    mean = sum_j w_j m_j
    cov  = sum_j w_j (k_j + m_j m_j') - mean mean'

Sums always run over months in ascending order so results do not depend on
the order models were supplied or finished.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import as_matrix
from .exceptions import NumericalError
from .gp import GPPrediction, OptimizerConfig, TrainingSet, fit_gp, predict
from .kernel import KernelParams

__all__ = [
    "MixingWeights",
    "MixturePrediction",
    "equal_weights",
    "mse_weights",
    "mix",
    "mix_moments",
    "MonthlyGPEnsemble",
]

logger = logging.getLogger(__name__)

EQUAL = "equal"
MSE = "mse"


@dataclass(frozen=True)
class MixingWeights:
    weights: dict
    scheme: str
    calibration_month: int = None
    mse: dict = field(default_factory=dict)

    def __post_init__(self):
        total = sum(self.weights.values())
        if any(w < 0 for w in self.weights.values()) or abs(total - 1.0) > 1e-12:
            raise ValueError(f"weights must be non-negative and sum to 1, got sum {total!r}")
        if self.scheme == MSE and self.calibration_month is None:
            raise ValueError("MSE weights require a calibration month")

    @property
    def active(self):
        return sorted(m for m, w in self.weights.items() if w > 0)

    def to_frame(self):
        months = sorted(set(self.weights) | ({self.calibration_month} - {None}))
        return pd.DataFrame({
            "month_id": months,
            "weight": [self.weights.get(m, 0.0) for m in months],
            "mse": [self.mse.get(m, np.nan) for m in months],
        })


@dataclass(frozen=True)
class MixturePrediction:
    mean: np.ndarray
    # full m x m matrix, or None in diagonal mode
    cov: np.ndarray
    var: np.ndarray
    weights: MixingWeights
    component_means: dict

    def to_frame(self, asset_ids):
        return pd.DataFrame({
            "asset_id": asset_ids,
            "predicted_return": self.mean,
            "predictive_variance": self.var,
        })


def _normalized(raw):
    months = sorted(raw)
    total = 0.0
    for m in months:
        total += raw[m]
    w = {m: raw[m] / total for m in months}
    # absorb the last-ulp residual so the sum is 1 to machine precision
    drift = 1.0 - sum(w[m] for m in months)
    w[months[-1]] += drift
    return w


def equal_weights(months):
    months = sorted(set(int(m) for m in months))
    if not months:
        raise ValueError("equal_weights needs at least one month")
    return MixingWeights(weights=_normalized({m: 1.0 for m in months}), scheme=EQUAL)


def weights_from_mse(mse, calibration_month):
    """Inverse-MSE weights; a zero MSE takes all the weight (limit of the formula)."""
    if not mse:
        raise ValueError("no models to weight")
    months = sorted(mse)
    zero = [m for m in months if mse[m] == 0.0]
    if zero:
        raw = {m: (1.0 if m == zero[0] else 0.0) for m in months}
    else:
        raw = {m: 1.0 / mse[m] for m in months}
    w = _normalized(raw)
    w[calibration_month] = 0.0
    return MixingWeights(weights=w, scheme=MSE, calibration_month=calibration_month, mse=dict(mse))


def mse_weights(models, calib, workers=1):
    """Weights from each model's mean squared error on a held-out calibration slice.

    ``calib`` must expose ``month_id``, ``features`` and ``returns`` and be
    strictly later than every model's month.
    """
    if not models:
        raise ValueError("mse_weights needs at least one model")
    if calib.features.shape[0] < 1:
        raise ValueError("calibration slice is empty")
    late = [m for m in models if m >= calib.month_id]
    if late:
        raise ValueError(f"calibration month {calib.month_id} is not after model months {late}")
    months = sorted(models)

    def one(m):
        try:
            pred = predict(models[m], calib.features, full_cov=False).mean
        except NumericalError:
            logger.warning("model %s failed on calibration month %s", m, calib.month_id)
            return m, None
        return m, float(np.mean((calib.returns - pred) ** 2))

    results = _map(one, months, workers)
    mse = {m: v for m, v in results if v is not None}
    if not mse:
        raise NumericalError("every model failed to predict the calibration month",
                             month_id=calib.month_id)
    return weights_from_mse(mse, calib.month_id)


def _map(fn, items, workers):
    if workers and workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def mix_moments(weights, predictions, diagonal=False):
    """Mixture mean/covariance from component predictions keyed by month."""
    months = sorted(m for m, w in weights.items() if w > 0)
    first = predictions[months[0]]
    m_dim = first.mean.shape[0]
    mean = np.zeros(m_dim)
    second = np.zeros(m_dim) if diagonal else np.zeros((m_dim, m_dim))
    for j in months:
        w, pred = weights[j], predictions[j]
        mean += w * pred.mean
        if diagonal:
            second += w * (pred.var + pred.mean**2)
        else:
            second += w * (pred.cov + np.outer(pred.mean, pred.mean))
    if diagonal:
        var = second - mean**2
        return mean, None, var
    cov = second - np.outer(mean, mean)
    cov = 0.5 * (cov + cov.T)
    return mean, cov, np.diag(cov).copy()


def mix(models, weights, X_test, diagonal=False, workers=1):
    """Mixture prediction at ``X_test`` over the positively weighted months."""
    X_test = as_matrix(X_test, "X_test")
    active = weights.active
    absent = [m for m in active if m not in models]
    if absent:
        raise ValueError(f"no model for positively weighted months {absent}")

    def one(m):
        return m, predict(models[m], X_test, full_cov=not diagonal)

    preds = dict(_map(one, active, workers))
    mean, cov, var = mix_moments(weights.weights, preds, diagonal=diagonal)
    return MixturePrediction(
        mean=mean, cov=cov, var=var, weights=weights,
        component_means={m: preds[m].mean for m in active},
    )


class MonthlyGPEnsemble(RegressorMixin, BaseEstimator):
    """Mixture-of-experts GP trained on month-grouped rows.

    ``fit(X, y, months)`` trains one GP per distinct month. With
    ``weighting="mse"`` the latest month is held out to calibrate the
    weights of the others; with ``"equal"`` every month counts the same.

    Parameters
    ----------
    weighting : {"equal", "mse"}
    sigma, alpha, beta, noise_var : initial kernel parameters
    n_restarts, max_iter, gtol : optimizer settings
    diagonal : bool
        Only materialize predictive variances, not full covariances.
    random_state : int
    """

    def __init__(self, weighting="mse", sigma=1.0, alpha=0.1, beta=1.0, noise_var=1e-10,
                 n_restarts=3, max_iter=200, gtol=1e-6, diagonal=False, random_state=0):
        self.weighting = weighting
        self.sigma = sigma
        self.alpha = alpha
        self.beta = beta
        self.noise_var = noise_var
        self.n_restarts = n_restarts
        self.max_iter = max_iter
        self.gtol = gtol
        self.diagonal = diagonal
        self.random_state = random_state

    def fit(self, X, y, months):
        X = as_matrix(X)
        y = np.asarray(y, dtype=np.float64)
        months = np.asarray(months)
        if self.weighting not in (EQUAL, MSE):
            raise ValueError(f"unknown weighting {self.weighting!r}")
        distinct = sorted(int(m) for m in np.unique(months))
        if self.weighting == MSE and len(distinct) < 2:
            raise ValueError("mse weighting needs at least two months")
        init = KernelParams(self.sigma, self.alpha, self.beta, self.noise_var)
        config = OptimizerConfig(max_iter=self.max_iter, gtol=self.gtol, n_restarts=self.n_restarts)
        train_months = distinct[:-1] if self.weighting == MSE else distinct
        self.models_ = {}
        for m in train_months:
            rows = months == m
            self.models_[m] = fit_gp(TrainingSet(X[rows], y[rows], m), init, config,
                                     seed=self.random_state)
        if self.weighting == MSE:
            cal = distinct[-1]
            rows = months == cal
            self.weights_ = mse_weights(self.models_, _Calibration(cal, X[rows], y[rows]))
        else:
            self.weights_ = equal_weights(train_months)
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X, return_std=False, return_cov=False):
        check_is_fitted(self, "models_")
        pred = mix(self.models_, self.weights_, X, diagonal=self.diagonal and not return_cov)
        if return_cov:
            return pred.mean, pred.cov
        if return_std:
            return pred.mean, np.sqrt(np.maximum(pred.var, 0.0))
        return pred.mean


@dataclass(frozen=True)
class _Calibration:
    month_id: int
    features: np.ndarray
    returns: np.ndarray
