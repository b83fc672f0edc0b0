"""Exception types raised by the ISS toolkit.

Every error derives from ``IssRnnError`` and from the builtin it specialises,
so callers can catch either one.
"""

from typing import Any, Optional


class IssRnnError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(IssRnnError, ValueError):
    """Array shapes do not match the operation's requirements."""


class ParameterError(IssRnnError, ValueError):
    """An argument lies outside its valid range."""


class TopologyError(IssRnnError, ValueError):
    """A model topology or receiver specification is inconsistent."""


class DegenerateLayerError(TopologyError):
    """Compaction would leave a layer with no components."""


class ConsistencyError(IssRnnError, ValueError):
    """Two artifacts that must describe the same model disagree."""


class FormatError(IssRnnError, ValueError):
    """A serialized file is malformed."""


class ConfigError(IssRnnError, ValueError):
    """A configuration file or override is invalid."""


class UsageError(IssRnnError, ValueError):
    """The command line was used incorrectly."""


class NumericError(IssRnnError, ArithmeticError):
    """A loss or gradient became non-finite."""


class DivergenceError(NumericError):
    """Training diverged.

    Attributes:
        model: The last model whose loss was finite.
        metrics: Metrics recorded up to the last good epoch.
    """

    def __init__(self, message: str, model: Any = None, metrics: Optional[Any] = None):
        super().__init__(message)
        self.model = model
        self.metrics = metrics
