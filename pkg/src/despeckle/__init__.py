"""SAR despeckling toolkit.

Simulates multiplicative Gamma speckle, trains a conv/BN/ReLU denoising
network with a three-term spatial/statistical loss on a from-scratch
reverse-mode tensor engine, and scores results with reference (SSIM, SNR,
MSE) and no-reference (ENL, ratio homogeneity, M-index proxy) metrics.
"""

from .autodiff import Tape, Tensor
from .data import DatasetSpec, PatchSets, denormalize, extract_patches, normalize
from .errors import (
    BlockSelectionError,
    ConfigError,
    DespeckleError,
    DivergenceError,
    DomainError,
    FormatError,
    NumericError,
    QuantizationError,
    ShapeError,
    StateError,
)
from .estimators import CNNDespeckler, SpeckleNoiser
from .losses import LossWeights, edge_loss, kl_loss, l2_loss, total_loss
from .metrics import (
    MetricsReport,
    enl,
    m_index_proxy,
    mse,
    ratio_homogeneity,
    snr_db,
    ssim,
)
from .network import (
    Model,
    NetworkConfig,
    PRESETS,
    build,
    despeckle,
    grid_audit,
    load_checkpoint,
    param_count,
    resolve_preset,
    save_checkpoint,
)
from .optim import Adam
from .speckle import SpecklePair, corrupt, sample_speckle
from .training import train

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "BlockSelectionError",
    "CNNDespeckler",
    "ConfigError",
    "DatasetSpec",
    "DespeckleError",
    "DivergenceError",
    "DomainError",
    "FormatError",
    "LossWeights",
    "MetricsReport",
    "Model",
    "NetworkConfig",
    "NumericError",
    "PRESETS",
    "PatchSets",
    "QuantizationError",
    "ShapeError",
    "SpecklePair",
    "SpeckleNoiser",
    "StateError",
    "Tape",
    "Tensor",
    "build",
    "corrupt",
    "denormalize",
    "despeckle",
    "edge_loss",
    "enl",
    "extract_patches",
    "grid_audit",
    "kl_loss",
    "l2_loss",
    "load_checkpoint",
    "m_index_proxy",
    "mse",
    "normalize",
    "param_count",
    "ratio_homogeneity",
    "resolve_preset",
    "sample_speckle",
    "save_checkpoint",
    "snr_db",
    "ssim",
    "total_loss",
    "train",
]
