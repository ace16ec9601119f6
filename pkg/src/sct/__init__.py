"""Scalable composite transformation model for spatial fields.

Fits an invertible three-layer map (parametric marginals, monotone
spline correction, triangular transport map) to an ensemble of fields
and generates new fields by inverting it.
"""

from .errors import IOFormatError, NumericalError, SCTError, ValidationError
from .estimation import OptimizerConfig, Stage1Result, stage1_fit, stage2_fit
from .geometry import LocationSet, MaximinOrdering, distance, maximin_order
from .io import (
    Ensemble,
    ModelConfig,
    ingest_csv,
    load_model,
    read_ensemble,
    read_noise,
    save_model,
    write_ensemble,
    write_noise,
)
from .model import (
    FittedModel,
    ScoreReport,
    exceedance_map,
    fit_model,
    global_quantile,
    log_density,
    log_density_parts,
    log_score,
    sample,
)
from .transport import TMPosterior, tm_fit

__version__ = "0.1.0"

__all__ = [
    "Ensemble",
    "FittedModel",
    "IOFormatError",
    "LocationSet",
    "MaximinOrdering",
    "ModelConfig",
    "NumericalError",
    "OptimizerConfig",
    "SCTError",
    "ScoreReport",
    "Stage1Result",
    "TMPosterior",
    "ValidationError",
    "distance",
    "exceedance_map",
    "fit_model",
    "global_quantile",
    "ingest_csv",
    "load_model",
    "log_density",
    "log_density_parts",
    "log_score",
    "maximin_order",
    "read_ensemble",
    "read_noise",
    "sample",
    "save_model",
    "stage1_fit",
    "stage2_fit",
    "tm_fit",
    "write_ensemble",
    "write_noise",
    "__version__",
]
