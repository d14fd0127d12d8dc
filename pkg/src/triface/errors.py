"""Exception hierarchy shared across the package.

CLI exit codes: InvalidArgumentError -> 2, InvalidStateError -> 3,
NumericFailureError -> 4.
"""


class TrifaceError(Exception):
    pass


class InvalidArgumentError(TrifaceError):
    """Caller passed a value outside an operation's precondition."""


class InvalidStateError(TrifaceError):
    """Operation requires a model/dataset that is missing or untrained."""


class NumericFailureError(TrifaceError):
    """Non-finite loss or other unrecoverable numeric breakdown."""


class FormatError(TrifaceError):
    """Corrupt or unsupported container file."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ProtocolError(FormatError):
    """Malformed wire packet."""
