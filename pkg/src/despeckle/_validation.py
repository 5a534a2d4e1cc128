"""Input validation helpers shared by the estimator API."""

from __future__ import annotations

import numpy as np

from .errors import DomainError, ShapeError


def as_image_stack(X, name: str = "X") -> np.ndarray:
    """Coerce input to a float64 (n, H, W) image stack.

    Accepts a single (H, W) image, an (n, H, W) stack, or an (n, 1, H, W)
    stack with a singleton channel axis.
    """
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    elif arr.ndim == 4 and arr.shape[1] == 1:
        arr = arr[:, 0]
    if arr.ndim != 3:
        raise ShapeError(
            f"{name} must be (H, W), (n, H, W) or (n, 1, H, W), got shape {np.shape(X)}"
        )
    if arr.shape[0] == 0 or arr.shape[1] == 0 or arr.shape[2] == 0:
        raise ShapeError(f"{name} has an empty axis: shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{name} contains non-finite values")
    return arr


def check_nonnegative(arr: np.ndarray, name: str = "X") -> np.ndarray:
    if np.any(arr < 0):
        raise DomainError(f"{name} must be nonnegative intensity data")
    return arr
