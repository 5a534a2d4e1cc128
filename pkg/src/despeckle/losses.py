"""Three-term despeckling objective: L2 + lambda_edge * edge + lambda_kl * KL.

The L2 and edge terms compare the estimate against the clean reference in
the spatial domain. The KL term compares the distribution of the implied
noise field (noisy / estimate) against the theoretical Gamma speckle
distribution for the given look count, using a soft histogram so the term
stays differentiable in the estimate. Mean (not sum) convention throughout,
which keeps the lambda weights independent of patch size.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DomainError, ShapeError

_PROB_FLOOR = 1e-10


@dataclass(frozen=True)
class LossWeights:
    """Weights and histogram parameters for the composite loss.

    ``kl_bins`` equal-width bins span (0, kl_range]; ratios above the range
    are clamped into the last bin. ``kl_bandwidth`` is the Gaussian kernel
    width of the soft histogram (default: half a bin width). ``eps_ratio``
    floors the estimate in the noisy/estimate quotient.
    """

    lambda_edge: float = 1.0
    lambda_kl: float = 1.0
    kl_bins: int = 64
    kl_range: float = 8.0
    kl_bandwidth: float = 0.0625
    eps_ratio: float = 1e-3

    def __post_init__(self):
        if not (math.isfinite(self.lambda_edge) and self.lambda_edge >= 0):
            raise ConfigError(f"lambda_edge must be finite and >= 0, got {self.lambda_edge}")
        if not (math.isfinite(self.lambda_kl) and self.lambda_kl >= 0):
            raise ConfigError(f"lambda_kl must be finite and >= 0, got {self.lambda_kl}")
        if int(self.kl_bins) != self.kl_bins or self.kl_bins < 2:
            raise ConfigError(f"kl_bins must be an integer >= 2, got {self.kl_bins}")
        if not (math.isfinite(self.kl_range) and self.kl_range > 0):
            raise ConfigError(f"kl_range must be finite and > 0, got {self.kl_range}")
        if not (math.isfinite(self.kl_bandwidth) and self.kl_bandwidth > 0):
            raise ConfigError(f"kl_bandwidth must be > 0, got {self.kl_bandwidth}")
        if not (math.isfinite(self.eps_ratio) and self.eps_ratio > 0):
            raise ConfigError(f"eps_ratio must be > 0, got {self.eps_ratio}")


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def l2_loss(estimate: Tensor, reference: Tensor) -> Tensor:
    """Mean squared difference between estimate and reference."""
    _check_same_shape(estimate, reference, "l2_loss")
    return ad.mean(ad.square(ad.sub(estimate, reference)))


def edge_loss(estimate: Tensor, reference: Tensor) -> Tensor:
    """Mean squared difference of forward-difference image gradients.

    Horizontal gradient x[i, j+1] - x[i, j] (last column excluded) and
    vertical gradient x[i+1, j] - x[i, j] (last row excluded); the loss is
    the mean squared horizontal-gradient difference plus the mean squared
    vertical-gradient difference. Blind to constant offsets.
    """
    _check_same_shape(estimate, reference, "edge_loss")
    if estimate.ndim < 2 or estimate.shape[-1] < 2 or estimate.shape[-2] < 2:
        raise ShapeError(f"edge_loss needs spatial dims >= 2, got shape {estimate.shape}")

    def grad_h(x: Tensor) -> Tensor:
        return ad.sub(x[..., 1:], x[..., :-1])

    def grad_v(x: Tensor) -> Tensor:
        return ad.sub(x[..., 1:, :], x[..., :-1, :])

    h_term = ad.mean(ad.square(ad.sub(grad_h(estimate), grad_h(reference))))
    v_term = ad.mean(ad.square(ad.sub(grad_v(estimate), grad_v(reference))))
    return ad.add(h_term, v_term)


@functools.lru_cache(maxsize=32)
def gamma_bin_masses(looks: int, bins: int, r_max: float) -> np.ndarray:
    """Theoretical Gamma(looks, looks) probability mass per histogram bin.

    Bin b spans (b*w, (b+1)*w] with w = r_max / bins; the mass beyond r_max
    is folded into the last bin, matching the clamping applied to ratio
    values. Computed by Simpson integration of the density; cached. The
    returned array is shared, treat it as read-only.
    """
    looks = int(looks)
    if looks < 1:
        raise DomainError(f"looks must be >= 1, got {looks}")
    width = r_max / bins
    sub = 64  # Simpson subintervals per bin, even

    def pdf(x: np.ndarray) -> np.ndarray:
        out = np.zeros_like(x)
        pos = x > 0
        xp = x[pos]
        out[pos] = np.exp(
            looks * math.log(looks)
            + (looks - 1) * np.log(xp)
            - looks * xp
            - math.lgamma(looks)
        )
        if looks == 1:
            out[x == 0] = 1.0
        return out

    masses = np.empty(bins)
    for b in range(bins):
        xs = np.linspace(b * width, (b + 1) * width, sub + 1)
        ys = pdf(xs)
        h = width / sub
        masses[b] = (h / 3.0) * (ys[0] + ys[-1] + 4.0 * ys[1:-1:2].sum() + 2.0 * ys[2:-1:2].sum())
    tail = 1.0 - masses.sum()
    masses[-1] += max(tail, 0.0)
    masses /= masses.sum()
    return masses


def soft_histogram(values: Tensor, bins: int, r_max: float, sigma: float) -> Tensor:
    """Kernel-weighted normalized histogram over ``bins`` bins spanning (0, r_max].

    Each value contributes a truncated Gaussian bump of bandwidth ``sigma``
    centered on its value to nearby bin centers; the bin sums are normalized
    to a probability vector. Differentiable with respect to the values.
    Values are accumulated in sorted order, so the result is bitwise
    invariant to permutations of the input.
    """
    if values.size == 0:
        raise ShapeError("soft_histogram: empty input")
    width = r_max / bins
    centers = (np.arange(bins) + 0.5) * width
    radius = int(np.ceil(12.0 * sigma / width)) + 1

    flat = values.data.reshape(-1)
    order = np.argsort(flat, kind="stable")
    sv = flat[order]
    idx = np.minimum((sv / width).astype(np.int64), bins - 1)

    sums = np.zeros(bins)
    for d in range(-radius, radius + 1):
        j = idx + d
        valid = (j >= 0) & (j < bins)
        if not np.any(valid):
            continue
        jv = j[valid]
        w = np.exp(-0.5 * ((sv[valid] - centers[jv]) / sigma) ** 2)
        sums += np.bincount(jv, weights=w, minlength=bins)
    total = sums.sum()
    probs = sums / total

    def backward(g):
        # d(probs_b)/d(sums_c) = (delta_bc - probs_b) / total
        g_sums = (g - float(np.dot(g, probs))) / total
        g_sorted = np.zeros_like(sv)
        for d in range(-radius, radius + 1):
            j = idx + d
            valid = (j >= 0) & (j < bins)
            if not np.any(valid):
                continue
            jv = j[valid]
            svv = sv[valid]
            cj = centers[jv]
            w = np.exp(-0.5 * ((svv - cj) / sigma) ** 2)
            g_sorted[valid] += g_sums[jv] * w * (cj - svv) / (sigma * sigma)
        g_flat = np.zeros_like(flat)
        g_flat[order] = g_sorted
        return (g_flat.reshape(values.shape),)

    return ad.custom_op((values,), probs, backward, op="soft_histogram")


def _hard_histogram(values: np.ndarray, bins: int, r_max: float) -> np.ndarray:
    edges = np.linspace(0.0, r_max, bins + 1)
    counts, _ = np.histogram(np.minimum(values, r_max), bins=edges)
    return counts / values.size


def kl_loss(
    noisy: Tensor,
    estimate: Tensor,
    looks: int,
    weights: LossWeights | None = None,
    soft: bool = True,
) -> Tensor:
    """KL divergence of the implied noise distribution from theoretical speckle.

    The implied noise is noisy / max(estimate, eps_ratio), clamped to the
    histogram range. With ``soft=True`` (default) the histogram is
    differentiable in the estimate; with ``soft=False`` a hard histogram is
    used and the term contributes no gradient. Both the empirical and the
    theoretical probabilities are floored at 1e-10 inside the logarithm.
    """
    w = weights if weights is not None else LossWeights()
    _check_same_shape(noisy, estimate, "kl_loss")
    if np.any(noisy.data < 0):
        raise DomainError("kl_loss: noisy intensities must be nonnegative")
    floored = ad.clamp_min(estimate, w.eps_ratio)
    ratio = ad.clamp_max(ad.div(noisy, floored), w.kl_range)
    if soft:
        probs = soft_histogram(ratio, w.kl_bins, w.kl_range, w.kl_bandwidth)
    else:
        probs = Tensor(_hard_histogram(ratio.data, w.kl_bins, w.kl_range))
    q = gamma_bin_masses(int(looks), w.kl_bins, w.kl_range)
    log_q = Tensor(np.log(np.maximum(q, _PROB_FLOOR)))
    log_p = ad.log(ad.clamp_min(probs, _PROB_FLOOR))
    return ad.tensor_sum(ad.mul(probs, ad.sub(log_p, log_q)))


def total_loss(
    estimate: Tensor,
    reference: Tensor,
    noisy: Tensor,
    weights: LossWeights,
    looks: int,
    soft: bool = True,
) -> tuple[Tensor, dict[str, float]]:
    """Weighted sum of the three terms plus a per-term breakdown.

    Zero-weighted terms are left out of the differentiated sum entirely (so
    lambda_edge = lambda_kl = 0 reproduces ``l2_loss`` exactly) but their
    values are still evaluated, detached, for the breakdown.
    """
    total = l2_loss(estimate, reference)
    l2_value = total.item()

    if weights.lambda_edge > 0:
        edge = edge_loss(estimate, reference)
        total = ad.add(total, ad.mul(edge, weights.lambda_edge))
        edge_value = edge.item()
    else:
        edge_value = edge_loss(estimate.detach(), reference.detach()).item()

    if weights.lambda_kl > 0:
        kl = kl_loss(noisy, estimate, looks, weights, soft=soft)
        total = ad.add(total, ad.mul(kl, weights.lambda_kl))
        kl_value = kl.item()
    else:
        kl_value = kl_loss(noisy.detach(), estimate.detach(), looks, weights, soft=soft).item()

    breakdown = {
        "l2": l2_value,
        "edge": edge_value,
        "kl": kl_value,
        "total": total.item(),
    }
    return total, breakdown
