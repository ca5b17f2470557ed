"""Exception hierarchy shared by every subsystem."""


class DetDistillError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(DetDistillError, ValueError):
    """Invalid or incompatible configuration (model spec, loss mode, KD method)."""


class InputError(DetDistillError, ValueError):
    """Malformed input arrays, boxes, ids or thresholds."""


class DataError(DetDistillError):
    """Training data that violates a mode's requirements."""


class LoadError(DetDistillError, FileNotFoundError):
    """A file required by a dataset split is missing."""


class ParseError(DetDistillError, ValueError):
    """An annotation file could not be parsed."""


class CatalogError(DetDistillError, KeyError):
    """A class name is not part of the class catalog."""

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class ConsistencyError(DetDistillError, ValueError):
    """Image and mask (or other paired arrays) disagree in shape."""


class GenerationError(DetDistillError, RuntimeError):
    """The synthetic generator could not satisfy its placement constraints."""


class CorruptionError(DetDistillError, ValueError):
    """A persisted artifact fails its checksum."""
