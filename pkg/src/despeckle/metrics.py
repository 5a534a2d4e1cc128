"""Reference and no-reference despeckling quality metrics.

Reference metrics (MSE, SNR, SSIM) compare an estimate against the clean
truth and are meant to run on denormalized intensities so their magnitudes
are comparable across experiments. No-reference metrics (ENL, ratio-image
homogeneity, M-index proxy) inspect the ratio noisy/estimate, which for an
ideal filter is statistically pure speckle.
"""

from __future__ import annotations

import csv
import datetime
import functools
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BlockSelectionError, DomainError, QuantizationError, ShapeError

_GLCM_LEVELS = 64
_GLCM_OFFSETS = ((0, 1), (1, 0), (1, 1), (1, -1))
_BASELINE_SEED = 271828  # fixed internal seed for the pure-speckle reference draws
_BASELINE_DRAWS = 4
_DEV_CAP = 20.0
_KAPPA = 100.0


def _check_pair(estimate, reference, op: str) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(estimate, dtype=np.float64)
    b = np.asarray(reference, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
    return a, b


def mse(estimate, reference) -> float:
    est, ref = _check_pair(estimate, reference, "mse")
    return float(np.mean((est - ref) ** 2))


def snr_db(estimate, reference) -> float:
    """Reconstruction SNR: 10*log10(sum(ref^2) / sum((ref - est)^2)).

    A zero residual returns +inf; an all-zero reference is a domain error
    (its signal power is undefined as a ratio).
    """
    est, ref = _check_pair(estimate, reference, "snr_db")
    signal = float(np.sum(ref * ref))
    if signal == 0.0:
        raise DomainError("snr_db: reference image is all zero")
    residual = float(np.sum((ref - est) ** 2))
    if residual == 0.0:
        return math.inf
    return 10.0 * math.log10(signal / residual)


def ssim(estimate, reference, dynamic_range: float) -> float:
    """Mean local SSIM over 8x8 uniform sliding windows.

    Stabilizers C1 = (0.01*range)^2 and C2 = (0.03*range)^2; moments are
    biased (divide by window size). Returns 1.0 exactly for identical
    inputs and is symmetric in its arguments.
    """
    est, ref = _check_pair(estimate, reference, "ssim")
    if est.ndim != 2:
        raise ShapeError(f"ssim expects 2-d images, got shape {est.shape}")
    win = 8
    if est.shape[0] < win or est.shape[1] < win:
        raise ShapeError(f"ssim needs images at least {win}x{win}, got {est.shape}")
    if not (math.isfinite(dynamic_range) and dynamic_range > 0):
        raise DomainError(f"ssim: dynamic_range must be > 0, got {dynamic_range}")
    c1 = (0.01 * dynamic_range) ** 2
    c2 = (0.03 * dynamic_range) ** 2

    wx = np.lib.stride_tricks.sliding_window_view(est, (win, win))
    wy = np.lib.stride_tricks.sliding_window_view(ref, (win, win))
    mu_x = wx.mean(axis=(-2, -1))
    mu_y = wy.mean(axis=(-2, -1))
    var_x = (wx * wx).mean(axis=(-2, -1)) - mu_x * mu_x
    var_y = (wy * wy).mean(axis=(-2, -1)) - mu_y * mu_y
    cov = (wx * wy).mean(axis=(-2, -1)) - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))


def enl(image, region: tuple[int, int, int, int] | None = None) -> float:
    """Equivalent number of looks, mean^2 / variance, over a rectangle.

    ``region`` is (top, left, height, width); None uses the whole image.
    The caller declares the region homogeneous. Zero variance returns +inf.
    """
    arr = np.asarray(image, dtype=np.float64)
    if region is not None:
        top, left, height, width = region
        arr = arr[top : top + height, left : left + width]
        if arr.size == 0:
            raise ShapeError(f"enl: empty region {region}")
    m = float(arr.mean())
    v = float(arr.var())
    if v == 0.0:
        return math.inf
    return m * m / v


def haralick_homogeneity(image, levels: int = _GLCM_LEVELS) -> float:
    """Raw GLCM homogeneity of an image, in [0, 1].

    Gray levels are quantized between the 1st and 99th percentiles; the
    co-occurrence matrix is accumulated for offsets (0,1), (1,0), (1,1),
    (1,-1), symmetrized, normalized per offset, and averaged. Homogeneity
    is sum P(i,j) / (1 + |i - j|). A constant image occupies one level and
    scores exactly 1.
    """
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 2 or arr.shape[1] < 2:
        raise ShapeError(f"haralick_homogeneity expects a 2-d image >= 2x2, got {arr.shape}")
    q = _quantize(arr, levels)
    weights = 1.0 / (1.0 + np.abs(np.arange(levels)[:, None] - np.arange(levels)[None, :]))
    total = 0.0
    for dr, dc in _GLCM_OFFSETS:
        if dc >= 0:
            a = q[: q.shape[0] - dr, : q.shape[1] - dc]
            b = q[dr:, dc:]
        else:
            a = q[: q.shape[0] - dr, -dc:]
            b = q[dr:, : q.shape[1] + dc]
        counts = np.bincount(
            (a.ravel() * levels + b.ravel()).astype(np.int64), minlength=levels * levels
        ).reshape(levels, levels)
        sym = counts + counts.T
        p = sym / sym.sum()
        total += float((p * weights).sum())
    return total / len(_GLCM_OFFSETS)


def _quantize(arr: np.ndarray, levels: int) -> np.ndarray:
    lo, hi = np.percentile(arr, [1.0, 99.0])
    if not (math.isfinite(lo) and math.isfinite(hi)) or hi < lo:
        raise QuantizationError(f"degenerate percentile range [{lo}, {hi}]")
    if hi == lo:
        return np.zeros(arr.shape, dtype=np.int64)
    scaled = (arr - lo) / (hi - lo) * levels
    return np.clip(scaled.astype(np.int64), 0, levels - 1)


@functools.lru_cache(maxsize=64)
def _speckle_homogeneity_baseline(looks: int, height: int, width: int) -> float:
    """Expected raw homogeneity of pure L-look speckle at the given size."""
    total = 0.0
    for i in range(_BASELINE_DRAWS):
        rng = np.random.default_rng(
            np.random.SeedSequence([_BASELINE_SEED, looks, height, width, i])
        )
        draws = rng.standard_exponential(size=(looks, height, width))
        total += haralick_homogeneity(draws.sum(axis=0) / looks)
    return total / _BASELINE_DRAWS


def ratio_image(noisy, estimate, eps_ratio: float = 1e-3) -> np.ndarray:
    n, e = _check_pair(noisy, estimate, "ratio_image")
    return n / np.maximum(e, eps_ratio)


def ratio_homogeneity(noisy, estimate, looks: int = 1, eps_ratio: float = 1e-3) -> float:
    """Structure leakage in the ratio image, baseline-adjusted to [0, 1].

    Raw GLCM homogeneity of noisy/estimate minus the expected homogeneity
    of pure L-look speckle of the same size (seeded reference draws),
    clamped at 0. Pure residual speckle therefore scores approximately 0;
    a constant ratio (identity filter) scores near the 1 - baseline maximum.
    """
    ratio = ratio_image(noisy, estimate, eps_ratio)
    if ratio.ndim != 2:
        raise ShapeError(f"ratio_homogeneity expects 2-d images, got shape {ratio.shape}")
    raw = haralick_homogeneity(ratio)
    baseline = _speckle_homogeneity_baseline(int(looks), ratio.shape[0], ratio.shape[1])
    return max(raw - baseline, 0.0)


def m_index_proxy(
    noisy,
    estimate,
    looks: int = 1,
    block: int = 32,
    eps_ratio: float = 1e-3,
) -> float:
    """No-reference quality proxy: ENL deviation of the ratio plus leakage.

    Scene-homogeneous blocks are selected by the squared coefficient of
    variation of the noisy image (thresholds 1.5/L, 2/L, 3/L tried in
    order); the median ENL of the ratio image over those blocks should be
    L for an ideal filter. Returns |ENL - L|/L (capped) plus 100 times
    ratio_homogeneity. A proxy: monotone in the same defects as the
    published ENL+homogeneity combination, not bit-compatible with it.
    """
    n, e = _check_pair(noisy, estimate, "m_index_proxy")
    if n.ndim != 2:
        raise ShapeError(f"m_index_proxy expects 2-d images, got shape {n.shape}")
    looks = int(looks)
    ratio = ratio_image(n, e, eps_ratio)
    blocks = select_homogeneous_blocks(n, looks, block)
    enls = [enl(ratio, b) for b in blocks]
    deviation = abs(float(np.median(enls)) - looks) / looks
    if not math.isfinite(deviation) or deviation > _DEV_CAP:
        deviation = _DEV_CAP
    return deviation + _KAPPA * ratio_homogeneity(n, e, looks, eps_ratio)


def select_homogeneous_blocks(
    noisy: np.ndarray, looks: int = 1, block: int = 32
) -> list[tuple[int, int, int, int]]:
    """Grid blocks of the noisy image whose squared coefficient of variation
    is consistent with unstructured L-look speckle. Thresholds 1.5/L, 2/L,
    3/L are tried in order; the first nonempty selection wins."""
    noisy = np.asarray(noisy, dtype=np.float64)
    rows = noisy.shape[0] // block
    cols = noisy.shape[1] // block
    if rows == 0 or cols == 0:
        raise ShapeError(
            f"image {noisy.shape} too small for {block}x{block} block selection"
        )
    cv2 = np.empty((rows, cols))
    for r in range(rows):
        for c in range(cols):
            tile = noisy[r * block : (r + 1) * block, c * block : (c + 1) * block]
            m = tile.mean()
            cv2[r, c] = math.inf if m == 0 else tile.var() / (m * m)
    thresholds = [1.5 / looks, 2.0 / looks, 3.0 / looks]
    for thr in thresholds:
        hits = np.argwhere(cv2 <= thr)
        if len(hits) > 0:
            return [(int(r) * block, int(c) * block, block, block) for r, c in hits]
    raise BlockSelectionError(
        "no homogeneous block found: every block's squared coefficient of variation "
        f"exceeded the thresholds tried {thresholds}"
    )


# ---------------------------------------------------------------------------
# report assembly
# ---------------------------------------------------------------------------

_REFERENCE_COLUMNS = ("ssim", "snr_db", "mse")
_NOREFERENCE_COLUMNS = ("enl", "homogeneity", "m_index_proxy")


@dataclass
class MetricsReport:
    """Per-image metric records plus aggregates, serializable to CSV/JSON."""

    mode: str  # "reference" or "noreference"
    metadata: dict = field(default_factory=dict)
    records: list = field(default_factory=list)

    def __post_init__(self):
        if self.mode not in ("reference", "noreference"):
            raise DomainError(f"unknown report mode {self.mode!r}")

    @property
    def columns(self) -> tuple[str, ...]:
        return _REFERENCE_COLUMNS if self.mode == "reference" else _NOREFERENCE_COLUMNS

    def add(self, image: str, **values) -> None:
        cols = self.columns
        if set(values) != set(cols):
            raise DomainError(f"record must have exactly {cols}, got {sorted(values)}")
        _validate_record(values)
        self.records.append({"image": image, **{c: float(values[c]) for c in cols}})

    def aggregates(self) -> dict[str, float]:
        return {
            c: float(np.mean([r[c] for r in self.records])) if self.records else math.nan
            for c in self.columns
        }

    def write_csv(self, path) -> None:
        """One row per image plus a final "mean" row; floats via repr so the
        file re-parses to the same doubles."""
        agg = self.aggregates()
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(("image",) + self.columns)
            for rec in self.records:
                writer.writerow([rec["image"]] + [repr(rec[c]) for c in self.columns])
            writer.writerow(["mean"] + [repr(agg[c]) for c in self.columns])

    def write_json(self, path) -> None:
        payload = {
            "mode": self.mode,
            "metadata": dict(self.metadata),
            "count": len(self.records),
            "aggregates": self.aggregates(),
        }
        payload["metadata"].setdefault(
            "timestamp", datetime.datetime.now(datetime.timezone.utc).isoformat()
        )
        with open(path, "w", encoding="utf-8") as f:
            json.dump(payload, f, indent=2, sort_keys=True)
            f.write("\n")


def _validate_record(values: dict) -> None:
    if "ssim" in values and not (-1.0 - 1e-9 <= values["ssim"] <= 1.0 + 1e-9):
        raise DomainError(f"ssim out of [-1, 1]: {values['ssim']}")
    if "mse" in values and values["mse"] < 0:
        raise DomainError(f"negative mse: {values['mse']}")
    if "enl" in values and not values["enl"] > 0:
        raise DomainError(f"enl must be > 0: {values['enl']}")
    if "homogeneity" in values and not (0.0 <= values["homogeneity"] <= 1.0):
        raise DomainError(f"homogeneity out of [0, 1]: {values['homogeneity']}")
