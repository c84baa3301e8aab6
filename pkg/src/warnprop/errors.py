"""Exception types shared across the toolkit."""


class DomainError(ValueError):
    """An argument lies outside the domain of an operation."""


class NumericError(ArithmeticError):
    """A numerical procedure failed to meet its error budget."""


class ResourceError(RuntimeError):
    """A size or iteration cap was exceeded."""
