"""Cumulative style/fog domain adaptation for semantic segmentation,
at desk scale: synthetic tri-domain data, a disentangling translation
network, stage-wise adaptation and cyclic refinement with a cumulative
consistency loss, plus the evaluation and reporting tools around them.
"""

__version__ = "0.1.0"

from .config import ExperimentConfig, load_config
from .errors import (
    ConfigurationError,
    CudanetError,
    DataError,
    MissingPrerequisiteError,
    NumericalError,
    PipelineError,
)
from .networks import NetworkState
from .synth import DatasetManifest, build_tridomain_dataset

__all__ = [
    "ConfigurationError",
    "CudanetError",
    "DataError",
    "DatasetManifest",
    "ExperimentConfig",
    "MissingPrerequisiteError",
    "NetworkState",
    "NumericalError",
    "PipelineError",
    "build_tridomain_dataset",
    "load_config",
    "__version__",
]
