"""Exception hierarchy shared across the engine.

The CLI maps these onto process exit codes: invalid input -> 2,
numerical stall -> 3, file format problems -> 4.
"""


class PgetError(Exception):
    """Base class for all engine errors."""


class InvalidInputError(PgetError):
    """A precondition on user-supplied values does not hold."""


class StallError(PgetError):
    """The trust-region iteration cannot make progress."""


class ZeroModelDecreaseError(PgetError):
    """The local model predicts no decrease, so the agreement ratio is undefined."""


class FormatError(PgetError):
    """A binary or text artifact does not match its declared format."""
