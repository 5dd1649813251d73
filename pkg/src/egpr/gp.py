"""Exact Gaussian process regression on a single training subset.

The prior mean is zero. The training covariance is ``K + noise_var * I``;
when its Cholesky factorization fails the diagonal term is escalated by
factors of ten up to ``MAX_JITTER`` and the level that succeeded is kept
on the fitted model.
"""

import hashlib
import json
import logging
from dataclasses import asdict, dataclass

import numpy as np
from scipy import linalg, optimize
from scipy.linalg import lapack
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import as_matrix, as_vector, check_same_columns
from .exceptions import NumericalError
from .kernel import KernelParams, gram_from_geometry, kernel_matrix, pairwise_geometry

__all__ = [
    "TrainingSet",
    "FittedGP",
    "GPPrediction",
    "OptimizerConfig",
    "marginal_log_likelihood",
    "mll_gradient",
    "fit_gp",
    "build_fitted",
    "predict",
    "save_model",
    "load_model",
    "GPRegressor",
]

logger = logging.getLogger(__name__)

MODEL_FORMAT_VERSION = 1
MIN_JITTER = 1e-10
MAX_JITTER = 1e-4
_LOG_2PI = np.log(2.0 * np.pi)

# box on theta = (log sigma, softplus^-1 alpha, log beta); keeps L-BFGS-B away
# from overflow in exp/softplus, far outside any sensible fitted value
THETA_BOUNDS = ((np.log(1e-8), np.log(1e4)), (-30.0, 50.0), (np.log(1e-8), np.log(1e8)))


@dataclass(frozen=True)
class TrainingSet:
    features: np.ndarray
    targets: np.ndarray
    month_id: int = 0

    def __post_init__(self):
        X = as_matrix(self.features, "features")
        y = as_vector(self.targets, "targets")
        if X.shape[0] != y.shape[0]:
            raise ValueError(f"targets length {y.shape[0]} != feature rows {X.shape[0]}")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "targets", y)
        object.__setattr__(self, "month_id", int(self.month_id))

    @property
    def n(self):
        return self.features.shape[0]

    @property
    def d(self):
        return self.features.shape[1]

    def checksum(self):
        h = hashlib.sha256()
        h.update(np.int64(self.month_id).tobytes())
        h.update(np.asarray(self.features.shape, dtype=np.int64).tobytes())
        h.update(np.ascontiguousarray(self.features).tobytes())
        h.update(np.ascontiguousarray(self.targets).tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class FittedGP:
    params: KernelParams
    train: TrainingSet
    chol: np.ndarray
    alpha_vec: np.ndarray
    mll: float
    # diagonal actually added to K, >= params.noise_var
    jitter: float

    @property
    def month_id(self):
        return self.train.month_id


@dataclass(frozen=True)
class GPPrediction:
    mean: np.ndarray
    var: np.ndarray
    cov: np.ndarray = None


@dataclass(frozen=True)
class OptimizerConfig:
    max_iter: int = 200
    gtol: float = 1e-6
    n_restarts: int = 3
    warm_start: bool = True
    sigma_range: tuple = (0.01, 1.0)
    beta_range: tuple = (0.1, 100.0)
    alpha_range: tuple = (0.0, 1.0)

    def to_dict(self):
        d = asdict(self)
        for k in ("sigma_range", "beta_range", "alpha_range"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, record):
        record = dict(record)
        for k in ("sigma_range", "beta_range", "alpha_range"):
            if k in record:
                record[k] = tuple(float(v) for v in record[k])
        return cls(**record)

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _jitter_levels(noise_var):
    levels = [noise_var]
    level = MIN_JITTER
    while level <= MAX_JITTER * (1 + 1e-12):
        if level > noise_var:
            levels.append(level)
        level *= 10.0
    return levels


def _factorize(K, noise_var, month_id=None):
    """Cholesky of ``K + jitter * I`` under the escalation policy."""
    n = K.shape[0]
    idx = np.diag_indices(n)
    diag = K[idx].copy()
    for jitter in _jitter_levels(noise_var):
        Ky = K.copy()
        Ky[idx] = diag + jitter
        try:
            L = linalg.cholesky(Ky, lower=True, check_finite=True)
        except (linalg.LinAlgError, ValueError):
            continue
        if jitter > noise_var:
            logger.info("month %s: Cholesky needed jitter %.1e", month_id, jitter)
        return L, jitter
    raise NumericalError(
        "Cholesky factorization failed after maximum jitter",
        month_id=month_id,
        diagnostic=f"diag range [{diag.min():.3e}, {diag.max():.3e}], n={n}",
    )


def _log_det_and_solve(L, y):
    a = linalg.cho_solve((L, True), y, check_finite=False)
    log_det = 2.0 * np.sum(np.log(np.diag(L)))
    return log_det, a


def marginal_log_likelihood(params, train):
    K = kernel_matrix(params, train.features)
    L, _ = _factorize(K, params.noise_var, train.month_id)
    log_det, a = _log_det_and_solve(L, train.targets)
    return float(-0.5 * train.n * _LOG_2PI - 0.5 * train.targets @ a - 0.5 * log_det)


class _Objective:
    """Negative MLL and its theta-gradient for one training set."""

    def __init__(self, train, noise_var):
        self.train = train
        self.noise_var = noise_var
        self.norms, self.dists = pairwise_geometry(train.features)

    def value_and_grad(self, theta):
        params = KernelParams.from_theta(theta, self.noise_var)
        mll, grad = self.mll_and_grad(params)
        if not np.isfinite(mll) or not np.all(np.isfinite(grad)):
            raise NumericalError("non-finite marginal likelihood", month_id=self.train.month_id)
        return -mll, -grad

    def mll_and_grad(self, params):
        y = self.train.targets
        n = y.shape[0]
        K = gram_from_geometry(params, self.norms, self.dists)
        L, _ = _factorize(K, params.noise_var, self.train.month_id)
        log_det, a = _log_det_and_solve(L, y)
        mll = -0.5 * n * _LOG_2PI - 0.5 * y @ a - 0.5 * log_det
        Kinv, info = lapack.dpotri(L, lower=1)
        if info != 0:
            raise NumericalError("triangular inverse failed", month_id=self.train.month_id)
        Kinv = np.tril(Kinv) + np.tril(Kinv, -1).T
        # dK/dsigma = 2K/sigma, dK/dalpha_ij = K_ij (|x_i|/a_i + |x_j|/a_j),
        # dK/dbeta = K * D / (beta (beta + D)); contracted against W = a a' - K^-1
        WK = (np.outer(a, a) - Kinv) * K
        ratio = self.norms / (1.0 + params.alpha * self.norms)
        beta = params.beta
        grad_natural = np.array([
            np.sum(WK) / params.sigma,
            ratio @ WK.sum(axis=1),
            0.5 * np.sum(WK * (self.dists / (beta * (beta + self.dists)))),
        ])
        return float(mll), grad_natural * params.theta_jacobian()


def mll_gradient(params, train):
    """Gradient of the MLL w.r.t. ``theta = (log sigma, softplus^-1 alpha, log beta)``.

    ``noise_var`` is held fixed and has no entry.
    """
    return _Objective(train, params.noise_var).mll_and_grad(params)[1]


def _restart_inits(init, config, rng):
    inits = [init]
    lo_s, hi_s = np.log(config.sigma_range)
    lo_b, hi_b = np.log(config.beta_range)
    for _ in range(config.n_restarts):
        inits.append(KernelParams(
            sigma=float(np.exp(rng.uniform(lo_s, hi_s))),
            alpha=float(rng.uniform(*config.alpha_range)),
            beta=float(np.exp(rng.uniform(lo_b, hi_b))),
            noise_var=init.noise_var,
        ))
    return inits


def fit_gp(train, init=None, config=None, seed=0):
    """Maximize the marginal likelihood from ``init`` plus random restarts.

    Restart draws come from a generator seeded by ``(seed, month_id)`` so the
    result for a month does not depend on which other months were fitted.
    """
    init = init or KernelParams()
    config = config or OptimizerConfig()
    rng = np.random.default_rng([int(seed), abs(int(train.month_id))])
    objective = _Objective(train, init.noise_var)

    best_theta, best_value = None, np.inf
    failures = []
    for start in _restart_inits(init, config, rng):
        theta0 = np.clip(start.to_theta(), *np.array(THETA_BOUNDS).T)
        try:
            res = optimize.minimize(
                objective.value_and_grad, theta0, jac=True, method="L-BFGS-B",
                bounds=THETA_BOUNDS,
                options={"maxiter": config.max_iter, "gtol": config.gtol, "ftol": 1e-14},
            )
        except NumericalError as exc:
            failures.append(str(exc))
            continue
        if np.isfinite(res.fun) and res.fun < best_value:
            best_theta, best_value = res.x, res.fun
    if best_theta is None:
        raise NumericalError(
            "all optimizer restarts failed", month_id=train.month_id,
            diagnostic="; ".join(failures[:3]),
        )
    params = KernelParams.from_theta(best_theta, init.noise_var)
    return build_fitted(params, train)


def build_fitted(params, train):
    """Factorize and solve at fixed ``params``; the only constructor of FittedGP."""
    X, y = train.features, train.targets
    K = kernel_matrix(params, X)
    L, jitter = _factorize(K, params.noise_var, train.month_id)
    log_det, a = _log_det_and_solve(L, y)
    mll = float(-0.5 * train.n * _LOG_2PI - 0.5 * y @ a - 0.5 * log_det)
    L.setflags(write=False)
    a.setflags(write=False)
    return FittedGP(params=params, train=train, chol=L, alpha_vec=a, mll=mll, jitter=jitter)


def predict(model, X_test, full_cov=True):
    X_test = as_matrix(X_test, "X_test")
    check_same_columns(X_test, model.train.features)
    Ks = kernel_matrix(model.params, X_test, model.train.features)
    mean = Ks @ model.alpha_vec
    V = linalg.solve_triangular(model.chol, Ks.T, lower=True, check_finite=False)
    if full_cov:
        cov = kernel_matrix(model.params, X_test) - V.T @ V
        cov = 0.5 * (cov + cov.T)
        return GPPrediction(mean=mean, var=np.diag(cov).copy(), cov=cov)
    prior = model.params.sigma**2 * (1.0 + model.params.alpha * np.linalg.norm(X_test, axis=1)) ** 2
    var = prior - np.einsum("ij,ij->j", V, V)
    return GPPrediction(mean=mean, var=var, cov=None)


# -- persistence --------------------------------------------------------------

def model_record(model):
    return {
        "format_version": MODEL_FORMAT_VERSION,
        "month_id": model.month_id,
        "params": model.params.to_dict(),
        "n": model.train.n,
        "d": model.train.d,
        "checksum": model.train.checksum(),
        "mll": model.mll,
        "jitter": model.jitter,
    }


def save_model(model, path):
    with open(path, "w") as fh:
        json.dump(model_record(model), fh, indent=2, sort_keys=True)


def model_from_record(record, train):
    if record.get("format_version") != MODEL_FORMAT_VERSION:
        raise ValueError(f"unsupported model format {record.get('format_version')!r}")
    if record["month_id"] != train.month_id or record["checksum"] != train.checksum():
        raise ValueError(f"model file does not match training slice of month {train.month_id}")
    return build_fitted(KernelParams.from_dict(record["params"]), train)


def load_model(path, train):
    """Rebuild a FittedGP from a model file and the slice it was trained on."""
    with open(path) as fh:
        record = json.load(fh)
    return model_from_record(record, train)


# -- estimator ----------------------------------------------------------------

class GPRegressor(RegressorMixin, BaseEstimator):
    """Single-subset exact GP regressor with the norm-modulated kernel.

    Parameters
    ----------
    sigma, alpha, beta : float
        Initial hyper-parameters (final values when ``optimize=False``).
    noise_var : float
        Fixed observation-noise variance.
    optimize : bool
        Fit hyper-parameters by marginal likelihood.
    n_restarts, max_iter, gtol : optimizer settings.
    random_state : int
    """

    def __init__(self, sigma=1.0, alpha=0.1, beta=1.0, noise_var=1e-10, optimize=True,
                 n_restarts=3, max_iter=200, gtol=1e-6, random_state=0):
        self.sigma = sigma
        self.alpha = alpha
        self.beta = beta
        self.noise_var = noise_var
        self.optimize = optimize
        self.n_restarts = n_restarts
        self.max_iter = max_iter
        self.gtol = gtol
        self.random_state = random_state

    def fit(self, X, y, month_id=0):
        train = TrainingSet(X, y, month_id)
        init = KernelParams(self.sigma, self.alpha, self.beta, self.noise_var)
        if self.optimize:
            config = OptimizerConfig(max_iter=self.max_iter, gtol=self.gtol,
                                     n_restarts=self.n_restarts)
            self.model_ = fit_gp(train, init, config, seed=self.random_state)
        else:
            self.model_ = build_fitted(init, train)
        self.params_ = self.model_.params
        self.n_features_in_ = train.d
        return self

    def predict(self, X, return_std=False, return_cov=False):
        check_is_fitted(self, "model_")
        pred = predict(self.model_, X, full_cov=return_cov)
        if return_cov:
            return pred.mean, pred.cov
        if return_std:
            return pred.mean, np.sqrt(np.maximum(pred.var, 0.0))
        return pred.mean

    def log_marginal_likelihood(self):
        check_is_fitted(self, "model_")
        return self.model_.mll
