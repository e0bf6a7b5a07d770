"""Exception hierarchy shared across the package."""


class FairpairError(Exception):
    """Base class for all package-specific errors."""


class FormatError(FairpairError, ValueError):
    """A container file is malformed; the message carries a byte offset."""


class ValidationError(FairpairError, ValueError):
    """Dataset content violates an invariant; the message carries a record index."""


class DomainError(FairpairError, ValueError):
    """An operation was called with an operand outside its domain."""


class ConfigError(FairpairError, ValueError):
    """A configuration file or CLI flag is invalid."""


class DegenerateDataError(FairpairError):
    """The dataset cannot support the requested computation (e.g. no negative pairs)."""


class PairingError(FairpairError):
    """A training batch cannot be paired (fewer than two identities)."""


class DivergenceError(FairpairError):
    """Training produced a non-finite loss."""

    def __init__(self, iteration: int, message: str = ""):
        self.iteration = iteration
        super().__init__(message or f"non-finite loss at iteration {iteration}")
