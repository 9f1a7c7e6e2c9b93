"""Exception hierarchy.

User/config problems derive from ``RegisforgeError``; broken internal
guarantees raise ``InvariantViolation`` (the CLI maps it to exit status 2).
"""


class RegisforgeError(Exception):
    """Base class for every error raised by this package."""


class InvariantViolation(RegisforgeError):
    pass


# idforge
class SequenceExhausted(RegisforgeError):
    pass


class MalformedSequence(RegisforgeError, ValueError):
    pass


# registry
class UnknownSvid(RegisforgeError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class ConflictingAlias(RegisforgeError):
    pass


class BirthRejected(RegisforgeError):
    pass


class MalformedDate(RegisforgeError, ValueError):
    pass


class DuplicateBirth(RegisforgeError):
    pass


class CycleDetected(RegisforgeError):
    pass


class TypeMismatch(RegisforgeError):
    pass


class UnknownStrataAttribute(RegisforgeError):
    pass


class FrameExists(RegisforgeError):
    pass


# timeline / linkage
class UnknownField(RegisforgeError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class ThresholdOutOfRange(RegisforgeError, ValueError):
    pass


class NonChainablePath(RegisforgeError):
    pass


# estimate
class UnknownCategory(RegisforgeError):
    pass


class UnknownDomain(RegisforgeError):
    pass


class SpecMismatch(RegisforgeError):
    pass


class CalibrationError(RegisforgeError):
    """Raking failed; ``diagnostics`` carries iterations and residuals."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class NonConvergence(CalibrationError):
    pass


class IncompatibleMargins(CalibrationError):
    pass


# quality / cli
class UnknownSource(RegisforgeError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class IncompleteRun(RegisforgeError):
    pass


class ConfigInvalid(RegisforgeError):
    pass


class MissingPrerequisite(RegisforgeError):
    def __init__(self, stage, detail=""):
        msg = f"missing prerequisite stage {stage!r}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)
        self.stage = stage
