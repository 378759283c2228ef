"""Exception taxonomy shared by every module in the package."""


class MinidistError(Exception):
    """Base class for all errors this package raises deliberately."""


class InvalidConfig(MinidistError):
    """A parameter combination that can never work (bad k, arity, ranks...)."""


class DisjointnessViolation(MinidistError):
    """Color trees whose interior node sets overlap."""


class LengthMismatch(MinidistError):
    """Participants disagree about buffer lengths."""


class OffsetOverflow(MinidistError):
    """A transfer slice does not fit in a signed 32-bit count."""


class PeerUnreachable(MinidistError):
    """A peer endpoint could not be contacted."""


class Closed(MinidistError):
    """The endpoint was shut down while an operation was in flight."""


class NotExposed(MinidistError):
    """A pull timed out waiting for the owner to expose the tag."""


class DeadlockDetected(MinidistError):
    """Every rank is blocked and no event can ever wake one."""


class FormatError(MinidistError):
    """A blob or index file does not parse."""


class GroupMismatch(MinidistError):
    """Group size does not divide the rank count, or groups disagree."""


class RecordTooLarge(MinidistError):
    """A single record exceeds the 32-bit slice limit."""


class EmptyShard(MinidistError):
    """An operation needs records but the shard holds none."""


class SegmentOverflow(MinidistError):
    """A shuffle segment payload exceeds the 32-bit slice limit."""


class DivergenceDetected(MinidistError):
    """Model replicas no longer agree bit for bit."""


class IoError(MinidistError):
    """An OS-level read or write failed; wraps the original OSError."""
