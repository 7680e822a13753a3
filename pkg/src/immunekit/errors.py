"""Exception hierarchy shared by every immunekit module."""


class ImmuneKitError(Exception):
    """Base class for all errors raised by immunekit."""


class ShapeError(ImmuneKitError, ValueError):
    """Tensor shapes do not agree with a node declaration or with each other."""


class NumericError(ImmuneKitError, ArithmeticError):
    """A computation produced NaN or Inf."""


class GraphStateError(ImmuneKitError, RuntimeError):
    """An operation was requested in the wrong graph state (e.g. backward before forward)."""


class StructuralError(ImmuneKitError, ValueError):
    """The graph does not connect the requested nodes."""


class CapabilityError(ImmuneKitError, TypeError):
    """The attack kind cannot be used the way it was requested."""


class TrainingError(ImmuneKitError, RuntimeError):
    """Training diverged or missed its success floor."""


class FormatError(ImmuneKitError, ValueError):
    """A file has the wrong magic, version or spec hash."""


class ParseError(FormatError):
    """A file is truncated or otherwise unreadable."""


class ConsistencyError(ImmuneKitError, ValueError):
    """Two related inputs disagree (e.g. image and label counts)."""


class UndefinedMetricError(ImmuneKitError, ZeroDivisionError):
    """A rate was requested over an empty denominator set."""


class UsageError(ImmuneKitError, ValueError):
    """Invalid arguments or configuration."""


class BudgetViolation(ImmuneKitError, AssertionError):
    """An immune perturbation left its tau-ball or the pixel range."""
