"""Exception types shared across the package."""


class LatentDragError(Exception):
    """Base class for all package errors."""


class ParameterError(LatentDragError, ValueError):
    """Invalid argument values or incompatible shapes."""


class CapabilityError(LatentDragError, RuntimeError):
    """The backend does not support the requested feature."""


class TrainingError(LatentDragError, RuntimeError):
    """Toy model training diverged or failed."""


class FinetuneError(LatentDragError, RuntimeError):
    """Identity fine-tuning diverged or failed."""


class OptimizationError(LatentDragError, RuntimeError):
    """Latent optimization produced a non-finite update."""


class ControllerError(LatentDragError, RuntimeError):
    """Attention controller state is inconsistent (e.g. missing capture)."""


class DatasetError(LatentDragError, RuntimeError):
    """Benchmark dataset is malformed or unreadable."""


class MetricUnavailableError(LatentDragError, RuntimeError):
    """An optional metric backend (e.g. a pretrained perceptual net) is not installed."""
