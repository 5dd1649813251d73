"""Norm-modulated inverse-distance covariance kernel.

    k(x, y) = sigma^2 (1 + alpha |x|) (1 + alpha |y|) / (1 + |x - y| / beta)

with Euclidean norms. ``sigma``, ``alpha`` and ``beta`` are trainable;
``noise_var`` is the fixed observation noise added to the diagonal of the
training covariance and never optimized.

Optimization works on an unconstrained vector
``theta = (log sigma, softplus^-1 alpha, log beta)``.
"""

from dataclasses import asdict, dataclass, replace

import numpy as np
from scipy.spatial.distance import cdist, pdist, squareform

from ._validation import as_feature_vector, as_matrix, check_same_columns

__all__ = [
    "KernelParams",
    "HYPERPARAMETERS",
    "kernel_eval",
    "kernel_matrix",
    "kernel_grad",
    "pairwise_geometry",
    "gram_from_geometry",
]

HYPERPARAMETERS = ("sigma", "alpha", "beta")

# minimum alpha representable in softplus space when an init is exactly 0
_ALPHA_FLOOR = 1e-8


@dataclass(frozen=True)
class KernelParams:
    sigma: float = 1.0
    alpha: float = 0.0
    beta: float = 1.0
    noise_var: float = 1e-10

    def __post_init__(self):
        for name in ("sigma", "alpha", "beta", "noise_var"):
            value = float(getattr(self, name))
            if not np.isfinite(value):
                raise ValueError(f"{name} must be finite, got {value}")
            object.__setattr__(self, name, value)
        if self.sigma <= 0 or self.beta <= 0:
            raise ValueError("sigma and beta must be positive")
        if self.alpha < 0 or self.noise_var < 0:
            raise ValueError("alpha and noise_var must be non-negative")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, record):
        return cls(**{k: float(record[k]) for k in ("sigma", "alpha", "beta", "noise_var")})

    def with_noise(self, noise_var):
        return replace(self, noise_var=noise_var)

    # -- unconstrained parameterization -----------------------------------

    def to_theta(self):
        alpha = max(self.alpha, _ALPHA_FLOOR)
        return np.array([np.log(self.sigma), _softplus_inv(alpha), np.log(self.beta)])

    @classmethod
    def from_theta(cls, theta, noise_var):
        theta = np.asarray(theta, dtype=np.float64)
        return cls(
            sigma=float(np.exp(theta[0])),
            alpha=float(np.logaddexp(0.0, theta[1])),
            beta=float(np.exp(theta[2])),
            noise_var=noise_var,
        )

    def theta_jacobian(self):
        """d(sigma, alpha, beta) / d theta, elementwise (the map is diagonal)."""
        alpha = max(self.alpha, _ALPHA_FLOOR)
        # d softplus(u)/du = 1 - exp(-softplus(u))
        return np.array([self.sigma, -np.expm1(-alpha), self.beta])


def _softplus_inv(a):
    if a > 30:
        return a + np.log(-np.expm1(-a))
    return float(np.log(np.expm1(a)))


def _norms(X):
    return np.sqrt(np.einsum("ij,ij->i", X, X))


def _distances(X, Y):
    if Y is None:
        return squareform(pdist(X, "euclidean"))
    return cdist(X, Y, "euclidean")


def kernel_eval(params, x, y):
    x = as_feature_vector(x, "x")
    y = as_feature_vector(y, "y")
    if x.shape != y.shape:
        raise ValueError(f"dimension mismatch: {x.shape[0]} vs {y.shape[0]}")
    ax = 1.0 + params.alpha * np.sqrt(x @ x)
    ay = 1.0 + params.alpha * np.sqrt(y @ y)
    d = np.sqrt(np.sum((x - y) ** 2))
    return float(params.sigma**2 * (ax * ay) * (1.0 / (1.0 + d / params.beta)))


def kernel_matrix(params, X, Y=None):
    """Covariance matrix between the rows of ``X`` and ``Y``.

    With ``Y=None`` the result is ``k(X, X)``, exactly symmetric.
    """
    X = as_matrix(X)
    if Y is not None:
        Y = as_matrix(Y, "Y")
        check_same_columns(X, Y)
    ax = 1.0 + params.alpha * _norms(X)
    ay = ax if Y is None else 1.0 + params.alpha * _norms(Y)
    G = 1.0 / (1.0 + _distances(X, Y) / params.beta)
    return (params.sigma**2 * np.outer(ax, ay)) * G


def kernel_grad(params, X):
    """Partial derivatives of ``k(X, X)`` w.r.t. (sigma, alpha, beta).

    Returns ``(K, [dK/dsigma, dK/dalpha, dK/dbeta])``.
    """
    X = as_matrix(X)
    return gram_from_geometry(params, _norms(X), _distances(X, None), with_grad=True)


def pairwise_geometry(X):
    """Row norms and pairwise distances of ``X``; reused across parameter values."""
    X = as_matrix(X)
    return _norms(X), _distances(X, None)


def gram_from_geometry(params, norms, dists, with_grad=False):
    a = 1.0 + params.alpha * norms
    h = 1.0 + dists / params.beta
    G = 1.0 / h
    s2 = params.sigma**2
    A = np.outer(a, a)
    K = (s2 * A) * G
    if not with_grad:
        return K
    dsigma = (2.0 * params.sigma * A) * G
    na = np.outer(norms, a)
    dalpha = (s2 * (na + na.T)) * G
    dbeta = (s2 * A) * (dists / (params.beta**2 * h * h))
    return K, [dsigma, dalpha, dbeta]
