"""Input checks shared by the estimator API."""

from __future__ import annotations

import numpy as np


def check_images(X, *, dims=None, name="X") -> np.ndarray:
    """Coerce a batch of grayscale images to float32 ``(n, H, W, 1)``.

    Accepts ``(n, H, W)`` or ``(n, H, W, 1)``. Values must be finite and
    within [0, 1]; ``dims`` optionally pins ``(H, W)``.
    """
    X = np.asarray(X)
    if X.dtype == object or not np.issubdtype(X.dtype, np.number):
        raise TypeError(f"{name} must be a numeric array, got dtype {X.dtype}")
    if X.ndim == 3:
        X = X[..., None]
    if X.ndim != 4 or X.shape[3] != 1:
        raise ValueError(f"{name} must have shape (n, H, W) or (n, H, W, 1), got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError(f"{name} contains no images")
    X = X.astype(np.float32, copy=False)
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains NaN or infinite values")
    if X.min() < 0.0 or X.max() > 1.0:
        raise ValueError(f"{name} values must lie in [0, 1], got range [{X.min()}, {X.max()}]")
    if dims is not None and tuple(X.shape[1:3]) != tuple(dims):
        raise ValueError(f"{name} images are {X.shape[1]}x{X.shape[2]}, expected {dims[0]}x{dims[1]}")
    return X


def check_pair(X, y):
    X = check_images(X)
    y = check_images(y, name="y")
    if X.shape != y.shape:
        raise ValueError(f"X and y shapes differ: {X.shape} vs {y.shape}")
    return X, y
