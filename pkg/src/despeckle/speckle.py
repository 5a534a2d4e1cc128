"""Fully developed multiplicative speckle simulation.

Intensity speckle for an L-look image follows a Gamma distribution with
shape L and rate L (unit mean, variance 1/L). A noisy observation is the
elementwise product of a nonnegative clean intensity image with such a
field. Single-look (L=1) reduces to the exponential distribution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .errors import DomainError, ShapeError


@dataclass(frozen=True)
class SpecklePair:
    """Clean intensity, speckle field, and their product, all (1, 1, H, W).

    Invariants: ``noisy == clean * noise`` elementwise, ``noise > 0``,
    ``clean >= 0``.
    """

    clean: Tensor
    noise: Tensor
    noisy: Tensor
    looks: int


def sample_speckle(shape, looks: int, seed: int, dtype=np.float64) -> Tensor:
    """Draw an i.i.d. speckle field with the given extents.

    Implemented as the mean of ``looks`` unit-rate exponential fields, which
    is exact for integer look counts; non-integer looks are rejected rather
    than approximated. Deterministic given ``seed``: the same seed yields a
    bitwise-identical field.
    """
    looks = _check_looks(looks)
    shape = tuple(int(s) for s in (shape if np.iterable(shape) else (shape,)))
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    draws = rng.standard_exponential(size=(looks,) + shape)
    field = draws.sum(axis=0) / looks
    return Tensor(field.astype(dtype, copy=False))


def corrupt(clean, looks: int, seed: int) -> SpecklePair:
    """Multiply a clean intensity image by a fresh speckle field.

    ``clean`` may be a Tensor or array of shape (H, W), (1, H, W) or
    (1, 1, H, W); the pair always stores (1, 1, H, W). Negative intensities
    are a domain error.
    """
    looks = _check_looks(looks)
    arr = clean.data if isinstance(clean, Tensor) else np.asarray(clean, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None, None]
    elif arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[:2] != (1, 1):
        raise ShapeError(f"corrupt expects a single single-channel image, got shape {arr.shape}")
    if np.any(arr < 0):
        raise DomainError("corrupt: clean intensities must be nonnegative")
    noise = sample_speckle(arr.shape, looks, seed, dtype=arr.dtype)
    noisy = arr * noise.data
    return SpecklePair(
        clean=Tensor(arr),
        noise=noise,
        noisy=Tensor(noisy),
        looks=looks,
    )


def _check_looks(looks) -> int:
    if not float(looks).is_integer():
        raise DomainError(f"looks must be a positive integer, got {looks!r}")
    looks = int(looks)
    if looks < 1:
        raise DomainError(f"looks must be >= 1, got {looks}")
    return looks
