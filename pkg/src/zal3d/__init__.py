"""Zero-shot 3D anomaly detection and localization on ordered point maps."""

from . import bank, config, data, formats, geometry, imageops, metrics, networks
from . import pipeline, pseudo, randnet, scoring
from .errors import (
    ConfigError,
    EmptyBankError,
    FormatError,
    MetricError,
    PipelineError,
    ScoringError,
    SynthesisError,
    TrainingError,
)

__version__ = "0.1.0"

__all__ = [
    "bank", "config", "data", "formats", "geometry", "imageops", "metrics",
    "networks", "pipeline", "pseudo", "randnet", "scoring",
    "ConfigError", "EmptyBankError", "FormatError", "MetricError",
    "PipelineError", "ScoringError", "SynthesisError", "TrainingError",
    "__version__",
]
