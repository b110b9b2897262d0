"""Exception hierarchy shared by every sketchpriv module."""


class SketchPrivError(Exception):
    """Base class for all library errors."""


class InvalidElement(SketchPrivError, ValueError):
    pass


class SaltMismatch(SketchPrivError):
    """Raised when a salt or sketch carries a different salt fingerprint."""


class ParamMismatch(SketchPrivError):
    """Raised when two sketches differ in algorithm or parameters."""


class FormatError(SketchPrivError, ValueError):
    """Raised on malformed serialized sketches."""


class InvalidMemory(SketchPrivError, ValueError):
    pass


class DomainError(SketchPrivError, ValueError):
    """An argument lies outside the mathematical domain of a formula."""


class UnknownKey(SketchPrivError, KeyError):
    pass


class DuplicateKey(SketchPrivError):
    pass


class PolicyViolation(SketchPrivError):
    """A request is not permitted under the active API policy."""


class UnknownSketch(SketchPrivError, LookupError):
    pass


class ServiceUnavailable(SketchPrivError, ConnectionError):
    pass
