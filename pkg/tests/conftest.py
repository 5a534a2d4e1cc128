"""Shared synthetic-scene generators for the test suite."""

import numpy as np
import pytest


def synthetic_scene(size: int = 256, seed: int = 0) -> np.ndarray:
    """Piecewise-smooth nonnegative intensity image in [0.05, 1].

    Contains flat rectangles (homogeneous regions for block selection),
    smooth shading, and hard edges, which is what the edge and ratio
    metrics need to discriminate filters.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 99]))
    yy, xx = np.mgrid[0:size, 0:size] / size
    img = 0.35 + 0.18 * np.sin(2 * np.pi * (2.0 * xx + 0.5)) * np.cos(2 * np.pi * (1.5 * yy))
    for _ in range(6):
        h = int(rng.integers(size // 8, size // 3))
        w = int(rng.integers(size // 8, size // 3))
        top = int(rng.integers(0, size - h))
        left = int(rng.integers(0, size - w))
        img[top : top + h, left : left + w] = float(rng.uniform(0.15, 0.9))
    cy, cx = rng.uniform(0.2, 0.8, size=2)
    r2 = (yy - cy) ** 2 + (xx - cx) ** 2
    img += 0.25 * np.exp(-r2 / 0.02)
    return np.clip(img, 0.05, 1.0)


def patch_stack(n: int, patch: int = 64, seed: int = 0) -> np.ndarray:
    """(n, 1, patch, patch) float32 crops from a few synthetic scenes."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 98]))
    scenes = [synthetic_scene(256, seed=seed * 13 + k) for k in range(4)]
    out = np.empty((n, 1, patch, patch), dtype=np.float32)
    for i in range(n):
        scene = scenes[int(rng.integers(len(scenes)))]
        y = int(rng.integers(scene.shape[0] - patch + 1))
        x = int(rng.integers(scene.shape[1] - patch + 1))
        out[i, 0] = scene[y : y + patch, x : x + patch]
    return out


@pytest.fixture
def scene_factory():
    return synthetic_scene


@pytest.fixture
def patch_factory():
    return patch_stack
