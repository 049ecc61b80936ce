"""Exception types shared across the package."""


class InvalidArgument(ValueError):
    pass


class InvalidState(RuntimeError):
    pass


class DegenerateInput(ValueError):
    pass


class FormatError(ValueError):
    """Malformed binary file. ``offset`` is the byte position where parsing failed."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset
