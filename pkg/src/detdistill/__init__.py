"""Self-training, knowledge distillation and partially annotated multi-task
learning for single-stage object detectors."""

__version__ = "0.1.0"

from .exceptions import (  # noqa: E402
    ConfigurationError,
    DataError,
    DetDistillError,
    InputError,
)

__all__ = ["ConfigurationError", "DataError", "DetDistillError", "InputError", "__version__"]
