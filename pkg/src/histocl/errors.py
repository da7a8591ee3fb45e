"""Exception types raised across the package."""


class HistoclError(Exception):
    """Base class for every error the package raises deliberately."""


class SingularMatrixError(HistoclError):
    """Stain matrix cannot be inverted (|det| below threshold)."""


class DegenerateStainError(HistoclError):
    """A perturbed stain vector collapsed to (near) zero optical density."""


class EmptyClassError(HistoclError):
    """A class has too few items for the requested per-class partition."""


class MissingClassError(HistoclError):
    """An expected class folder is absent or no classes were found."""


class DecodeError(HistoclError):
    """An image file could not be decoded; message carries the path."""


class ShapeMismatchError(HistoclError):
    """Array shape incompatible with the model or matrix contract."""


class UnknownTermError(HistoclError):
    """A loss term object of an unsupported type was supplied."""


class NonFiniteLossError(HistoclError):
    """The training loss evaluated to NaN or infinity."""


class NonFiniteUpdateError(HistoclError):
    """An SGD update produced non-finite parameters."""


class MissingDomainError(HistoclError):
    """A scenario builder needs domain ids the dataset does not carry."""


class InsufficientDataError(HistoclError):
    """A (class, domain) cell is too small to stratify across experiences."""


class PlanMismatchError(HistoclError):
    """A class plan does not match the dataset's label space."""


class LabelSpaceMismatchError(HistoclError):
    """Two datasets cannot be harmonized to a shared label space."""


class BudgetTooSmallError(HistoclError):
    """Exemplar budget leaves no room for at least one item per class."""


class ZeroReferenceError(HistoclError):
    """Gradient projection requested against a (near) zero reference."""


class DegeneratePrototypeError(HistoclError):
    """A prototype update collapsed to (near) zero norm."""


class ConfigError(HistoclError):
    """Invalid or unknown experiment configuration; treated as usage error."""
