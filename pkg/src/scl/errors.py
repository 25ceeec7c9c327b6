"""Exception hierarchy.

Every error raised by the library derives from :class:`SCLError`.  The two
intermediate classes decide the CLI exit code: validation problems map to 1,
numerical failures to 2.
"""


class SCLError(Exception):
    """Base class for all library errors."""


class ValidationError(SCLError, ValueError):
    """Input does not satisfy a structural or bound invariant."""


class NumericalFailure(SCLError, ArithmeticError):
    """A numerical routine could not produce a trustworthy result."""


class DimensionMismatch(ValidationError):
    pass


class NonFiniteEntry(ValidationError):
    pass


class LevelOutOfRange(ValidationError):
    pass


class ShapeMismatch(ValidationError):
    pass


class LengthMismatch(ValidationError):
    pass


class ParseError(ValidationError):
    """Malformed document; the message names the line or field."""


class UnknownScenario(ValidationError):
    pass


class IoError(SCLError, OSError):
    pass


class EmptyLog(ValidationError):
    pass


class InsufficientData(ValidationError):
    pass


class NonIdentifiable(ValidationError):
    pass


class Separation(NumericalFailure):
    """Gated fit with perfectly separated classes; the slope is unbounded."""

    def __init__(self, message: str, sign: int):
        super().__init__(message)
        self.sign = sign
        self.infinite = True


class RankDeficient(NumericalFailure):
    pass


class NonFiniteState(NumericalFailure):
    pass
