"""Input validation helpers built on ``sklearn.utils``."""

import numpy as np
from sklearn.utils import check_array


def as_matrix(X, name="X", allow_empty=False):
    X = check_array(X, dtype=np.float64, ensure_2d=True,
                    ensure_min_samples=0 if allow_empty else 1)
    return X


def as_vector(y, name="y", allow_nan=False):
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional, got shape {y.shape}")
    if not allow_nan and not np.all(np.isfinite(y)):
        raise ValueError(f"{name} contains non-finite entries")
    return y


def as_feature_vector(x, name="x"):
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    if x.ndim != 1 or x.size == 0:
        raise ValueError(f"{name} must be a non-empty vector")
    return x


def check_same_columns(X, Y):
    if X.shape[1] != Y.shape[1]:
        raise ValueError(f"feature dimension mismatch: {X.shape[1]} vs {Y.shape[1]}")


def check_square_symmetric(S, name="Sigma", atol=1e-10):
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ValueError(f"{name} must be square, got shape {S.shape}")
    scale = max(1.0, float(np.max(np.abs(S)))) if S.size else 1.0
    if not np.allclose(S, S.T, atol=atol * scale, rtol=0):
        raise ValueError(f"{name} must be symmetric")
    return S
