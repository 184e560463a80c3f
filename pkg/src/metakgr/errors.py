"""Exception types shared across the package."""


class InvalidArgument(ValueError):
    """A caller passed a value outside an operation's domain."""


class ParseError(InvalidArgument):
    def __init__(self, message, line_number=None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class ContractViolation(RuntimeError):
    """An operation was invoked in a state its contract forbids."""


class CheckpointVersionError(InvalidArgument):
    pass


class UnknownName(InvalidArgument):
    """A query named an entity or relation missing from the vocabulary."""
