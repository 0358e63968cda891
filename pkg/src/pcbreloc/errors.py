"""Exception hierarchy shared by every module of the package."""


class PcbRelocError(Exception):
    """Base class for all errors raised by pcbreloc."""


class NonRotation(PcbRelocError, ValueError):
    pass


class NonPositiveScale(PcbRelocError, ValueError):
    pass


class MalformedBox(PcbRelocError, ValueError):
    pass


class NegativeLabel(PcbRelocError, ValueError):
    pass


class EmptyLabelList(PcbRelocError, ValueError):
    pass


class InvalidState(PcbRelocError, RuntimeError):
    pass


class MissingGroundTruth(PcbRelocError, LookupError):
    pass


class ScheduleOutOfRange(PcbRelocError, ValueError):
    pass


class InvalidConfig(PcbRelocError, ValueError):
    pass


class ParseError(PcbRelocError, ValueError):
    """A file could not be parsed. ``line`` is 1-based when known."""

    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}" if where else f"line {line}"
        super().__init__(f"{where}: {message}" if where else message)


class NonUnitQuaternion(ParseError):
    pass


class VersionMismatch(ParseError):
    pass


class DegenerateInput(PcbRelocError, ValueError):
    pass


class NoOverlap(PcbRelocError, ValueError):
    pass


class EmptyInput(PcbRelocError, ValueError):
    pass


class SeedMismatch(PcbRelocError, ValueError):
    pass


class InvariantViolation(PcbRelocError, AssertionError):
    """A runtime self-check of the filter or state machine failed."""
