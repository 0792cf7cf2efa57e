"""Input validation helpers shared by the estimators."""
from __future__ import annotations

import numpy as np


def check_pixels(X, *, min_samples: int = 1) -> np.ndarray:
    """Return X as a finite float64 (n_samples, n_features) array."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"expected a 2-D (n_samples, n_features) array, got shape {X.shape}")
    if X.shape[0] < min_samples:
        raise ValueError(f"need at least {min_samples} samples, got {X.shape[0]}")
    if not np.all(np.isfinite(X)):
        raise ValueError("input contains NaN or infinity")
    return X


def check_coords(X, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    """Return X as an (n, 2) int64 array of (row, col) pixel coordinates."""
    X = np.asarray(X)
    if X.ndim != 2 or X.shape[1] != 2:
        raise ValueError(f"pixel coordinates must have shape (n, 2), got {X.shape}")
    if X.size and not np.issubdtype(X.dtype, np.integer):
        if not np.array_equal(X, np.round(X)):
            raise ValueError("pixel coordinates must be integers")
    X = X.astype(np.int64)
    if rows is not None and X.size:
        if X[:, 0].min() < 0 or X[:, 0].max() >= rows or X[:, 1].min() < 0 or X[:, 1].max() >= cols:
            raise ValueError(f"pixel coordinates outside the {rows}x{cols} raster")
    return X


def check_labels(y, n: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or y.shape[0] != n:
        raise ValueError(f"expected {n} labels, got shape {y.shape}")
    if y.size and not np.issubdtype(y.dtype, np.integer):
        raise TypeError("class labels must be integers")
    return y.astype(np.int64)


def l2_normalize(X: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    return X / (norms + eps)
