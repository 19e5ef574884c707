"""Exception types shared across the package."""


class BrainEvoError(Exception):
    """Base class for all package errors."""


class DimensionError(BrainEvoError, ValueError):
    """Operand shapes do not conform."""


class DomainError(BrainEvoError, ValueError):
    """A value lies outside the domain of an operation (e.g. log of 0)."""


class ContractError(BrainEvoError, ValueError):
    """A precondition of an operation was violated."""


class ValidationError(BrainEvoError, ValueError):
    """Input data violates a domain invariant."""


class LoadError(BrainEvoError, OSError):
    """A dataset or model file is missing or unreadable."""


class TrainingError(BrainEvoError, FloatingPointError):
    """Training produced a non-finite loss or gradient."""
