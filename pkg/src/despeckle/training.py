"""Adam training loop for the despeckling network.

Each epoch draws fresh speckle for the training patches; the validation
set keeps one fixed speckle draw for the whole run so the logged validation
curves are comparable across epochs. All randomness is derived from
(seed, stream, epoch) so a run is deterministic given its seed, and a
resumed run continues with exactly the draws the uninterrupted run would
have used.
"""

from __future__ import annotations

import os
import time

import numpy as np

from .autodiff import Tape, Tensor
from .errors import DivergenceError, NumericError, ShapeError
from .losses import LossWeights, edge_loss, kl_loss, l2_loss, total_loss
from .network import Model, save_checkpoint
from .optim import Adam

_TRAIN_STREAM = 0
_VAL_STREAM = 1


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, _TRAIN_STREAM, epoch]))


def _val_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, _VAL_STREAM]))


def _as_patch_stack(arr, name: str) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.ndim == 3:
        arr = arr[:, None]
    if arr.ndim != 4 or arr.shape[1] != 1:
        raise ShapeError(f"{name} must be (N, 1, H, W) or (N, H, W), got {arr.shape}")
    if arr.shape[0] == 0:
        raise ShapeError(f"{name} is empty")
    return arr


def _draw_noise(rng: np.random.Generator, shape: tuple[int, ...], looks: int) -> np.ndarray:
    return rng.standard_exponential(size=(looks,) + shape).sum(axis=0) / looks


def evaluate_validation(
    model: Model,
    val_clean: np.ndarray,
    val_noisy: np.ndarray,
    weights: LossWeights,
    looks: int,
    batch_size: int,
) -> dict[str, float]:
    """Eval-mode loss components over the whole validation set.

    MSE and edge are averaged over all patches; the KL term is computed on
    the pooled ratio distribution of the full set (it is a distribution
    statistic, not a per-patch one).
    """
    n = val_clean.shape[0]
    estimates = np.empty_like(val_clean, dtype=np.float64)
    for start in range(0, n, batch_size):
        stop = min(start + batch_size, n)
        out = model.forward(Tensor(val_noisy[start:stop]), training=False)
        estimates[start:stop] = out.data.astype(np.float64)
    est_t = Tensor(estimates)
    clean_t = Tensor(val_clean.astype(np.float64))
    noisy_t = Tensor(val_noisy.astype(np.float64))
    return {
        "val_mse": l2_loss(est_t, clean_t).item(),
        "val_edge": edge_loss(est_t, clean_t).item(),
        "val_kl": kl_loss(noisy_t, est_t, looks, weights).item(),
    }


def train(
    model: Model,
    train_clean,
    val_clean,
    weights: LossWeights,
    looks: int = 1,
    epochs: int = 130,
    lr: float = 3e-4,
    batch_size: int = 128,
    seed: int = 0,
    out_dir: str | None = None,
    start_epoch: int = 0,
    adam: Adam | None = None,
    soft_kl: bool = True,
    checkpoint_meta: dict | None = None,
) -> list[dict]:
    """Train in place for ``epochs`` epochs; returns the per-epoch log.

    Each log record carries the epoch number, mean training loss, the three
    validation components, and wall time. When ``out_dir`` is given, a
    checkpoint is written per epoch (plus ``best.dspk`` tracking the lowest
    weighted validation loss and ``final.dspk`` at the end). A non-finite
    loss aborts with :class:`~despeckle.errors.DivergenceError`; checkpoints
    already written stay on disk and the log gains a diagnostic record.

    ``start_epoch``/``adam`` support resuming: passing the values from a
    loaded checkpoint continues the run exactly as if it had not stopped.
    """
    train_clean = _as_patch_stack(train_clean, "train set").astype(model.dtype)
    val_clean = _as_patch_stack(val_clean, "validation set").astype(model.dtype)
    if train_clean.shape[2:] != val_clean.shape[2:]:
        raise ShapeError(
            f"train/val patch sizes differ: {train_clean.shape[2:]} vs {val_clean.shape[2:]}"
        )
    if batch_size < 1:
        raise ShapeError(f"batch size must be >= 1, got {batch_size}")

    if adam is None:
        adam = Adam(model.parameters(), lr=lr)
    else:
        adam.hp.lr = lr

    val_noisy = (val_clean * _draw_noise(_val_rng(seed), val_clean.shape, looks)).astype(
        model.dtype
    )

    n = train_clean.shape[0]
    log: list[dict] = []
    best_val = np.inf
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)

    for e in range(start_epoch + 1, start_epoch + epochs + 1):
        t0 = time.perf_counter()
        rng = _epoch_rng(seed, e)
        perm = rng.permutation(n)
        model.train()
        loss_sum = 0.0
        try:
            for start in range(0, n, batch_size):
                idx = perm[start : start + batch_size]
                clean = train_clean[idx]
                noise = _draw_noise(rng, clean.shape, looks).astype(model.dtype)
                noisy = clean * noise
                with Tape() as tape:
                    est = model.forward(Tensor(noisy))
                    total, _ = total_loss(
                        est, Tensor(clean), Tensor(noisy), weights, looks, soft=soft_kl
                    )
                    tape.backward(total)
                adam.step()
                loss_sum += total.item() * len(idx)
        except NumericError as err:
            record = {"epoch": e, "diverged": True, "error": str(err)}
            log.append(record)
            if out_dir is not None:
                _write_json(os.path.join(out_dir, "diverged.json"), record)
            failure = DivergenceError(
                f"training diverged at epoch {e}: {err}; last good checkpoint retained"
            )
            failure.log = log
            raise failure from err

        model.eval()
        val = evaluate_validation(model, val_clean, val_noisy, weights, looks, batch_size)
        record = {
            "epoch": e,
            "train_total": loss_sum / n,
            "val_mse": val["val_mse"],
            "val_kl": val["val_kl"],
            "val_edge": val["val_edge"],
            "wall_seconds": time.perf_counter() - t0,
        }
        log.append(record)

        if out_dir is not None:
            ckpt_meta = {"seed": seed, "looks": looks, **(checkpoint_meta or {})}
            save_checkpoint(
                os.path.join(out_dir, f"epoch_{e:03d}.dspk"), model, e, adam, ckpt_meta
            )
            weighted = (
                val["val_mse"]
                + weights.lambda_edge * val["val_edge"]
                + weights.lambda_kl * val["val_kl"]
            )
            if weighted < best_val:
                best_val = weighted
                save_checkpoint(os.path.join(out_dir, "best.dspk"), model, e, adam, ckpt_meta)

    if out_dir is not None:
        save_checkpoint(
            os.path.join(out_dir, "final.dspk"),
            model,
            start_epoch + epochs,
            adam,
            {"seed": seed, "looks": looks, **(checkpoint_meta or {})},
        )
    return log


def _write_json(path: str, payload: dict) -> None:
    import json

    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
