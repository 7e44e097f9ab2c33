"""Input validation shared by the estimators."""

from __future__ import annotations

from typing import Optional, Tuple

import numpy as np
from sklearn.utils.validation import check_array

from .autodiff import ShapeError


def check_canvases(X, shape: Optional[Tuple[int, int]] = None) -> np.ndarray:
    """Return ``X`` as a finite float64 array of shape (n, rows, cols).

    A single 2-D canvas is promoted to a batch of one.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3:
        raise ShapeError(f"expected canvases of shape (n, rows, cols), got {X.shape}")
    if shape is not None and X.shape[1:] != tuple(shape):
        raise ShapeError(f"canvas shape {X.shape[1:]} does not match codec input {tuple(shape)}")
    if X.shape[0] == 0:
        raise ValueError("no canvases given")
    check_array(X.reshape(X.shape[0], -1), ensure_all_finite=True, dtype=np.float64)
    return X


def check_xy(X, y, d: Optional[int] = None):
    X = check_array(X, dtype=np.float64)
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != len(X):
        raise ValueError(f"y must be 1-D with {len(X)} entries")
    if d is not None and X.shape[1] != d:
        raise ShapeError(f"X has {X.shape[1]} features, model expects {d}")
    return X, y.astype(np.int64)
