"""Input checks shared by the estimators."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array


def check_images(X, patch_px=None, name="X") -> np.ndarray:
    """Return ``X`` as a C-contiguous float32 ``(n, P, P)`` stack."""
    X = np.asarray(X)
    if X.ndim == 2:
        X = X[None]
    if X.ndim == 4 and X.shape[1] == 1:
        X = X[:, 0]
    X = check_array(X, allow_nd=True, dtype=np.float32, ensure_all_finite=True, input_name=name)
    if X.ndim != 3 or X.shape[1] != X.shape[2]:
        raise ValueError(f"{name} must be a stack of square images, got shape {X.shape}")
    if patch_px is not None and X.shape[1] != patch_px:
        raise ValueError(f"{name} has {X.shape[1]}px patches, model expects {patch_px}px")
    return np.ascontiguousarray(X)


def check_label_images(y, shape, n_classes=None, name="y") -> np.ndarray:
    y = np.asarray(y)
    if y.shape != tuple(shape):
        raise ValueError(f"{name} has shape {y.shape}, expected {tuple(shape)}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise ValueError(f"{name} must hold integer class ids")
        y = y.astype(np.int64)
    if y.size and y.min() < 0:
        raise ValueError(f"{name} contains negative class ids")
    if n_classes is not None and y.size and y.max() >= n_classes:
        raise ValueError(f"{name} contains class id {int(y.max())} >= n_classes={n_classes}")
    return y.astype(np.int64, copy=False)


def check_pairs(pairs, n_samples, name="pairs"):
    """Accept a PairList or an ``(m, 3)`` array of ``(a, b, y_dist)`` rows."""
    if hasattr(pairs, "pairs") and hasattr(pairs, "y_dist"):
        idx = np.asarray(pairs.pairs, dtype=np.int64)
        y = np.asarray(pairs.y_dist, dtype=np.float64)
    else:
        arr = check_array(pairs, dtype=np.float64, input_name=name)
        if arr.shape[1] != 3:
            raise ValueError(f"{name} must have 3 columns (a, b, y_dist), got {arr.shape[1]}")
        idx = arr[:, :2].astype(np.int64)
        if not np.array_equal(idx, arr[:, :2]):
            raise ValueError(f"{name} index columns must be integral")
        y = arr[:, 2]
    if len(idx) == 0:
        raise ValueError(f"{name} is empty")
    if idx.min() < 0 or idx.max() >= n_samples:
        raise ValueError(f"{name} references a patch outside [0, {n_samples})")
    if not np.all(np.isfinite(y)) or np.any(y < 0):
        raise ValueError(f"{name} distances must be finite and non-negative")
    return idx, y
