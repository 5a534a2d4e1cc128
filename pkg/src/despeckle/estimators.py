"""Scikit-learn style estimator front end.

Two transformers cover the toolkit's workflow:

* :class:`SpeckleNoiser` - a stateless transformer that multiplies clean
  intensity images by simulated speckle (useful for building corpora and
  for pipeline composition).
* :class:`CNNDespeckler` - fit on clean images in [0, 1]; fitting simulates
  speckle and trains the CNN, transform despeckles noisy images.

Both follow the get_params/set_params convention, so they compose with
sklearn model selection utilities.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import as_image_stack, check_nonnegative
from .errors import ShapeError
from .losses import LossWeights
from .metrics import ssim
from .network import Model, NetworkConfig, despeckle
from .optim import Adam
from .training import train


class SpeckleNoiser(TransformerMixin, BaseEstimator):
    """Corrupt clean intensity images with multiplicative L-look speckle.

    Stateless apart from hyperparameters; ``fit`` only validates input.
    ``transform`` is deterministic given ``seed`` and the input shape.
    """

    def __init__(self, looks: int = 1, seed: int = 0):
        self.looks = looks
        self.seed = seed

    def fit(self, X, y=None):
        check_nonnegative(as_image_stack(X))
        self.n_features_in_ = 1
        return self

    def transform(self, X) -> np.ndarray:
        arr = check_nonnegative(as_image_stack(X))
        from .speckle import _check_looks

        looks = _check_looks(self.looks)
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, 4]))
        noise = rng.standard_exponential(size=(looks,) + arr.shape).sum(axis=0) / looks
        return arr * noise


class CNNDespeckler(TransformerMixin, BaseEstimator):
    """Convolutional despeckler trained on simulated speckle pairs.

    ``fit(X)`` expects clean intensity images scaled to [0, 1]; it holds out
    ``val_fraction`` of them for the validation curves and trains the
    conv/BN/ReLU stack with the composite loss. ``transform(X)`` maps noisy
    images in the same scale to despeckled estimates. ``score`` is the mean
    SSIM against clean references.
    """

    def __init__(
        self,
        depth: int = 10,
        width: int = 32,
        kernel: int = 3,
        epochs: int = 30,
        lr: float = 3e-4,
        batch_size: int = 128,
        lambda_edge: float = 1.0,
        lambda_kl: float = 1.0,
        looks: int = 1,
        val_fraction: float = 0.1,
        seed: int = 0,
    ):
        self.depth = depth
        self.width = width
        self.kernel = kernel
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.lambda_edge = lambda_edge
        self.lambda_kl = lambda_kl
        self.looks = looks
        self.val_fraction = val_fraction
        self.seed = seed

    def fit(self, X, y=None):
        clean = check_nonnegative(as_image_stack(X))
        if clean.shape[0] < 2:
            raise ShapeError("need at least 2 images to hold out a validation split")
        if not 0.0 < self.val_fraction < 1.0:
            raise ShapeError(f"val_fraction must be in (0, 1), got {self.val_fraction}")
        n_val = max(1, int(round(clean.shape[0] * self.val_fraction)))
        if n_val >= clean.shape[0]:
            n_val = clean.shape[0] - 1
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, 5]))
        order = rng.permutation(clean.shape[0])
        val_idx, train_idx = order[:n_val], order[n_val:]

        config = NetworkConfig(
            depth=self.depth, width=self.width, kernel=self.kernel, seed=self.seed
        )
        self.model_ = Model(config, dtype=np.float32)
        weights = LossWeights(lambda_edge=self.lambda_edge, lambda_kl=self.lambda_kl)
        adam = Adam(self.model_.parameters(), lr=self.lr)
        self.log_ = train(
            self.model_,
            clean[train_idx][:, None],
            clean[val_idx][:, None],
            weights,
            looks=self.looks,
            epochs=self.epochs,
            lr=self.lr,
            batch_size=self.batch_size,
            seed=self.seed,
            adam=adam,
        )
        self.model_.eval()
        self.n_features_in_ = 1
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        noisy = as_image_stack(X)
        out = despeckle(self.model_, noisy[:, None])
        return out.data[:, 0]

    def predict(self, X) -> np.ndarray:
        return self.transform(X)

    def score(self, X, y) -> float:
        """Mean SSIM between despeckled X and clean references y (range 1.0)."""
        estimates = self.transform(X)
        clean = as_image_stack(y, name="y")
        if estimates.shape != clean.shape:
            raise ShapeError(f"X and y shapes differ: {estimates.shape} vs {clean.shape}")
        return float(np.mean([ssim(e, c, 1.0) for e, c in zip(estimates, clean)]))
