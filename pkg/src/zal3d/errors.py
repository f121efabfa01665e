"""Exception types shared across the package.

Argument-contract violations raise plain ValueError; these classes cover
failures that callers may want to catch and handle per stage.
"""


class FormatError(ValueError):
    """A binary file does not match its declared on-disk format."""


class ConfigError(ValueError):
    """An experiment configuration is inconsistent or violates the zero-shot constraint."""


class SynthesisError(RuntimeError):
    """Pseudo-anomaly synthesis could not produce a valid patch."""


class TrainingError(RuntimeError):
    """Training diverged or was fed an unusable stream."""


class ScoringError(RuntimeError):
    """Test-time scoring failed for a sample."""


class EmptyBankError(RuntimeError):
    """A query was issued against a memory bank with no rows."""


class MetricError(ValueError):
    """Metric inputs are degenerate (single class, no anomalous pixels, ...)."""


class PipelineError(RuntimeError):
    """A stage cannot resolve its inputs (missing manifest, maps, or ground truth)."""
