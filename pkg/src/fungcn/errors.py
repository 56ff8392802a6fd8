"""Exception hierarchy.

Errors split into two families so the CLI can map them onto exit codes:
``ContractError`` (bad input or configuration, exit 2) and
``NumericalError`` (a computation failed, exit 3).
"""


class FunGCNError(Exception):
    """Base class for all library errors."""


class ContractError(FunGCNError, ValueError):
    """Input violates a documented precondition."""


class ConfigError(ContractError):
    """Invalid configuration value."""


class DomainError(ContractError):
    """Evaluation point or curve outside / incompatible with a domain."""


class InvalidBasisError(ContractError):
    """Requested basis cannot be constructed."""


class IngestionError(ContractError):
    """Malformed or incomplete input data."""


class NumericalError(FunGCNError, ArithmeticError):
    """A numerical routine failed."""


class SmoothingError(NumericalError):
    """Penalized least squares could not be solved for any penalty."""


class FpcaError(NumericalError):
    """Functional PCA could not be computed."""


class DegenerateError(NumericalError):
    """Problem is degenerate (e.g. all predictors identically zero)."""


class ConvergenceError(NumericalError):
    """Iterative solver did not converge.

    Attributes
    ----------
    kkt_violation : float
        Largest residual KKT violation when the solver gave up.
    """

    def __init__(self, message, kkt_violation=float("nan")):
        super().__init__(message)
        self.kkt_violation = kkt_violation


class DivergenceError(NumericalError):
    """Training produced a non-finite loss."""

    def __init__(self, message, epoch=-1):
        super().__init__(message)
        self.epoch = epoch


class GenerationError(NumericalError):
    """Synthetic data could not be generated."""


class EmbeddingError(FunGCNError):
    """One or more features failed to embed.

    ``failures`` maps feature names to the underlying exception.
    """

    def __init__(self, failures):
        self.failures = dict(failures)
        names = ", ".join(f"{k}: {v}" for k, v in self.failures.items())
        super().__init__(f"embedding failed for {len(self.failures)} feature(s): {names}")

    @property
    def numerical(self):
        return any(isinstance(e, NumericalError) for e in self.failures.values())
