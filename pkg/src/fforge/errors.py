"""Exception types shared across the package."""


class FForgeError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(FForgeError, ValueError):
    pass


class DegenerateBatchError(FForgeError, ValueError):
    pass


class UnsatisfiablePlacementError(FForgeError, ValueError):
    """No source patch position distinct from the destination exists."""


class InvalidConfigError(FForgeError, ValueError):
    pass


class InvalidSplitError(FForgeError, ValueError):
    pass


class MissingGradError(FForgeError, RuntimeError):
    def __init__(self, name):
        super().__init__(f"parameter {name!r} has no gradient")
        self.name = name


class FormatError(FForgeError, ValueError):
    """Malformed container or checkpoint file."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset
