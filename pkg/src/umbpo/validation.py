"""Input validation helpers shared by the estimators."""
from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.exceptions import NotFittedError


def check_fitted(estimator, attribute: str) -> None:
    if not hasattr(estimator, attribute):
        raise NotFittedError(
            f"{type(estimator).__name__} is not initialized; call initialize() or fit() first")


def check_matrix(X, n_features: Optional[int], name: str = "X") -> np.ndarray:
    """Coerce ``X`` to a finite 2-D float64 array; a 1-D input becomes one row."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    if X.ndim != 2:
        raise ValueError(f"{name}: expected a 1-D or 2-D array, got shape {X.shape}")
    if n_features is not None and X.shape[1] != n_features:
        raise ValueError(f"{name}: expected {n_features} features, got {X.shape[1]}")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name}: contains NaN or infinity")
    return X


def check_vector(x, size: int, name: str = "x") -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.shape != (size,):
        raise ValueError(f"{name}: expected shape ({size},), got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name}: contains NaN or infinity")
    return x
