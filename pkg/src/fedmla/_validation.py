"""Input validation helpers shared by the estimator facade."""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError


def check_images(X, multiple: int = 1) -> np.ndarray:
    """Finite float64 images shaped (N, 1, H, W); (N, H, W) gains a channel axis."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4 or X.shape[1] != 1:
        raise ShapeError(f"images must be (N, 1, H, W) or (N, H, W), got {X.shape}")
    if len(X) == 0:
        raise ValueError("no images")
    if not np.all(np.isfinite(X)):
        raise ValueError("images contain NaN or Inf")
    if X.shape[2] % multiple or X.shape[3] % multiple:
        raise ShapeError(f"image size {X.shape[2]}x{X.shape[3]} must be divisible by {multiple}")
    return X


def check_masks(y, X) -> np.ndarray:
    """Binary masks (N, S, H, W) matching ``X`` in N, H and W; (N, H, W) gains S=1."""
    y = np.asarray(y)
    if y.ndim == 3:
        y = y[:, None]
    if y.ndim != 4 or y.shape[0] != X.shape[0] or y.shape[2:] != X.shape[2:]:
        raise ShapeError(f"masks {y.shape} do not match images {X.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("masks must be binary")
    return y.astype(np.uint8)


def check_domains(domains, n: int) -> np.ndarray:
    """Integer domain label per sample; ``None`` means one domain."""
    if domains is None:
        return np.zeros(n, dtype=np.int64)
    d = np.asarray(domains)
    if d.shape != (n,):
        raise ShapeError(f"need one domain label per sample ({n}), got shape {d.shape}")
    if d.dtype.kind not in "iu":
        raise ValueError("domain labels must be integers")
    return d.astype(np.int64)
