"""Probability-of-cascade surfaces for chained extremes with KANE networks."""
__version__ = "0.1.0"

from ._backend import BACKEND
from .diagnostics import bootstrap_ci, dunn_smyth, qq_reference
from .evt import (
    ColumnMapping,
    FeatureScaling,
    RawDataset,
    ThresholdError,
    ThresholdedSample,
    build_threshold_sample,
    empirical_threshold,
    read_dataset,
)
from .losses import bce_loss, ce_loss
from .network import (
    ConstantEstimate,
    GLayer,
    KaneNetwork,
    ModelFormatError,
    NonFiniteError,
    PocEstimate,
    canonical_widths,
    estimate_from_dict,
    loss_and_gradient,
)
from .ordinal import OrdinalModel, fit_ordinal, frank_hall_probs
from .simulation import generate, mise, monte_carlo, true_poc
from .splines import SplineDomainError, SplineSpec, design_matrix
from .training import FitConfig, FitError, FitReport, fit

__all__ = [
    "BACKEND", "ColumnMapping", "ConstantEstimate", "FeatureScaling", "FitConfig", "FitError",
    "FitReport", "GLayer", "KaneNetwork", "ModelFormatError", "NonFiniteError", "OrdinalModel",
    "PocEstimate", "RawDataset", "SplineDomainError", "SplineSpec", "ThresholdError",
    "ThresholdedSample", "bce_loss", "bootstrap_ci", "build_threshold_sample", "canonical_widths",
    "ce_loss", "design_matrix", "dunn_smyth", "empirical_threshold", "estimate_from_dict", "fit",
    "fit_ordinal", "frank_hall_probs", "generate", "loss_and_gradient", "mise", "monte_carlo",
    "qq_reference", "read_dataset", "true_poc",
]
