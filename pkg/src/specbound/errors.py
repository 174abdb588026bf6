"""Exception hierarchy shared by every module.

The CLI maps :class:`UsageError` to exit code 1 and every other
:class:`SpecboundError` to exit code 2.
"""


class SpecboundError(Exception):
    """Base class for all library errors."""


class UsageError(SpecboundError, ValueError):
    """Invalid argument combination or out-of-range parameter."""


class InputError(SpecboundError, ValueError):
    """Malformed or inconsistent input data (shapes, non-finite values)."""


class DegenerateInputError(InputError):
    """Input for which the requested quantity is undefined (e.g. a zero matrix)."""


class ConvergenceError(SpecboundError, RuntimeError):
    """An iterative method stopped before reaching its tolerance."""

    def __init__(self, message, last_iterate=None, estimate=None, trial=None):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.estimate = estimate
        self.trial = trial


class FormatError(SpecboundError, ValueError):
    """A file on disk does not follow the expected layout."""

    def __init__(self, message, layer=None, record=None):
        super().__init__(message)
        self.layer = layer
        self.record = record


class TrainingError(SpecboundError, RuntimeError):
    """Training diverged (non-finite loss)."""

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch
