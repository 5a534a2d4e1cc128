"""Dataset preparation: patch extraction, splits, and intensity scaling.

Source images are split by image (never by patch) so no scene leaks across
train/val/test. Per split, patches come from a regular grid, seeded
subsampling when the grid is larger than the request, or seeded random
extra offsets when it is smaller. Everything is reproducible from the
dataset seed, and the manifest records enough to invert the scaling.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import rasters
from .errors import ConfigError, DomainError, FormatError

SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class DatasetSpec:
    source_dir: str
    patch_size: int = 64
    train_patches: int = 1000
    val_patches: int = 200
    test_patches: int = 0
    stride: int | None = None  # None -> patch_size (non-overlapping grid)
    seed: int = 0
    normalize: str = "percentile"  # "percentile" | "none"

    def __post_init__(self):
        if self.patch_size < 1:
            raise ConfigError(f"patch_size must be >= 1, got {self.patch_size}")
        if self.stride is not None and self.stride < 1:
            raise ConfigError(f"stride must be >= 1, got {self.stride}")
        for name in ("train_patches", "val_patches", "test_patches"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.normalize not in ("percentile", "none"):
            raise ConfigError(f"unknown normalize mode {self.normalize!r}")

    @property
    def counts(self) -> dict[str, int]:
        return {
            "train": self.train_patches,
            "val": self.val_patches,
            "test": self.test_patches,
        }


@dataclass
class PatchSets:
    """Normalized patch stacks per split, (N, 1, p, p) float32, plus manifest."""

    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    manifest: dict = field(default_factory=dict)

    def split(self, name: str) -> np.ndarray:
        return getattr(self, name)


def normalize(image, divisor: float) -> np.ndarray:
    """Scale intensities into [0, 1]: clip(image / divisor, 0, 1)."""
    if not (math.isfinite(divisor) and divisor > 0):
        raise DomainError(f"normalization divisor must be finite and > 0, got {divisor}")
    return np.clip(np.asarray(image, dtype=np.float64) / divisor, 0.0, 1.0)


def denormalize(image, divisor: float) -> np.ndarray:
    return np.asarray(image, dtype=np.float64) * divisor


def training_divisor(train_pixels: np.ndarray) -> float:
    """The 99.9th percentile of the training split's raw intensities."""
    if train_pixels.size == 0:
        raise DomainError("cannot derive a divisor from an empty training split")
    divisor = float(np.percentile(train_pixels, 99.9))
    if divisor <= 0:
        raise DomainError("training split is all zero; cannot normalize")
    return divisor


def _assign_images(names: list[str], counts: dict[str, int], seed: int) -> dict[str, list[str]]:
    """Split source images across splits, proportional to requested patch
    counts, by largest remainder. Disjoint by construction."""
    active = [s for s in SPLITS if counts[s] > 0]
    assignment: dict[str, list[str]] = {s: [] for s in SPLITS}
    if not names or not active:
        return assignment
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    order = [names[i] for i in rng.permutation(len(names))]
    total = sum(counts[s] for s in active)
    quotas = {s: len(order) * counts[s] / total for s in active}
    floors = {s: int(math.floor(quotas[s])) for s in active}
    leftover = len(order) - sum(floors.values())
    by_remainder = sorted(active, key=lambda s: (quotas[s] - floors[s], s), reverse=True)
    for s in by_remainder[:leftover]:
        floors[s] += 1
    # every active split gets at least one image when there are enough to go around
    if len(order) >= len(active):
        donors = sorted(active, key=lambda s: floors[s], reverse=True)
        for s in active:
            if floors[s] == 0:
                donor = next(d for d in donors if floors[d] > 1)
                floors[donor] -= 1
                floors[s] += 1
    start = 0
    for s in active:
        assignment[s] = sorted(order[start : start + floors[s]])
        start += floors[s]
    return assignment


def _grid_positions(width: int, height: int, patch: int, stride: int) -> list[tuple[int, int]]:
    xs = range(0, width - patch + 1, stride)
    ys = range(0, height - patch + 1, stride)
    return [(x, y) for y in ys for x in xs]


def extract_patches(spec: DatasetSpec) -> PatchSets:
    """Read the source directory and produce per-split normalized patches.

    The manifest carries the seed, the divisor, per-split counts, skipped
    and unreadable files, and one {image, x, y, size, split} record per
    patch. Rerunning with the same spec yields a byte-identical manifest.
    """
    stride = spec.stride if spec.stride is not None else spec.patch_size
    names = sorted(
        n for n in os.listdir(spec.source_dir) if rasters.supported(os.path.join(spec.source_dir, n))
    )
    images: dict[str, np.ndarray] = {}
    unreadable: list[str] = []
    too_small: list[str] = []
    for name in names:
        try:
            arr, _ = rasters.read_raster(os.path.join(spec.source_dir, name))
        except (FormatError, OSError) as e:
            unreadable.append(f"{name}: {e}")
            continue
        if arr.shape[0] < spec.patch_size or arr.shape[1] < spec.patch_size:
            too_small.append(name)
            continue
        images[name] = arr

    assignment = _assign_images(sorted(images), spec.counts, spec.seed)
    records: list[dict] = []
    stacks: dict[str, np.ndarray] = {}
    for split_index, split in enumerate(SPLITS):
        wanted = spec.counts[split]
        members = assignment[split]
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 3, split_index]))
        positions: list[tuple[str, int, int]] = []
        for name in members:
            h, w = images[name].shape
            positions += [(name, x, y) for x, y in _grid_positions(w, h, spec.patch_size, stride)]
        chosen: list[tuple[str, int, int]]
        if wanted == 0 or not members:
            chosen = []
        elif len(positions) >= wanted:
            keep = np.sort(rng.permutation(len(positions))[:wanted])
            chosen = [positions[i] for i in keep]
        else:
            chosen = list(positions)
            while len(chosen) < wanted:
                name = members[int(rng.integers(len(members)))]
                h, w = images[name].shape
                x = int(rng.integers(w - spec.patch_size + 1))
                y = int(rng.integers(h - spec.patch_size + 1))
                chosen.append((name, x, y))
        p = spec.patch_size
        stack = np.empty((len(chosen), 1, p, p), dtype=np.float64)
        for i, (name, x, y) in enumerate(chosen):
            stack[i, 0] = images[name][y : y + p, x : x + p]
            records.append({"image": name, "x": x, "y": y, "size": p, "split": split})
        stacks[split] = stack

    if spec.normalize != "percentile":
        divisor = 1.0
    elif stacks["train"].size > 0:
        divisor = training_divisor(stacks["train"].ravel())
    elif all(stacks[s].size == 0 for s in SPLITS):
        divisor = 1.0  # empty extraction: keep the manifest writable with zero counts
    else:
        raise DomainError("percentile normalization needs a nonempty training split")
    for split in SPLITS:
        if spec.normalize == "percentile":
            stacks[split] = normalize(stacks[split], divisor).astype(np.float32)
        else:
            stacks[split] = stacks[split].astype(np.float32)

    manifest = {
        "seed": spec.seed,
        "divisor": divisor,
        "patch_size": spec.patch_size,
        "stride": stride,
        "normalize": spec.normalize,
        "source_images": len(images),
        "counts": {s: int(stacks[s].shape[0]) for s in SPLITS},
        "skipped_too_small": len(too_small),
        "skipped_files": too_small,
        "unreadable": unreadable,
        "splits": records,
    }
    return PatchSets(train=stacks["train"], val=stacks["val"], test=stacks["test"], manifest=manifest)


def save_patchsets(sets: PatchSets, out_dir) -> None:
    os.makedirs(out_dir, exist_ok=True)
    for split in SPLITS:
        np.save(os.path.join(out_dir, f"{split}.npy"), sets.split(split))
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as f:
        json.dump(sets.manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def load_patchsets(prepared_dir) -> PatchSets:
    manifest_path = os.path.join(prepared_dir, "manifest.json")
    if not os.path.exists(manifest_path):
        raise FormatError(f"{prepared_dir}: not a prepared dataset (missing manifest.json)")
    with open(manifest_path, "r", encoding="utf-8") as f:
        manifest = json.load(f)
    arrays = {}
    for split in SPLITS:
        path = os.path.join(prepared_dir, f"{split}.npy")
        arrays[split] = (
            np.load(path) if os.path.exists(path) else np.empty((0, 1, 1, 1), dtype=np.float32)
        )
    return PatchSets(train=arrays["train"], val=arrays["val"], test=arrays["test"], manifest=manifest)
