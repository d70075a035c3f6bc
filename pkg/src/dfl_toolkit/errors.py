"""Exception types shared across the toolkit.

Every exception carries the process exit code the CLI reports for it, so the
exit-code contract (0 success, 2 config/precondition, 3 bound violation,
4 numeric failure) lives in one place.
"""


class DFLError(Exception):
    """Base class for every error raised by the toolkit."""

    exit_code = 1


class RejectedInputError(DFLError, ValueError):
    """Raised when an input has the wrong shape, is empty or is malformed."""

    exit_code = 2


class ConfigurationError(DFLError):
    """Raised when an experiment configuration cannot be used as given."""

    exit_code = 2


class AssumptionViolationError(DFLError):
    """Raised when data or topology break a convergence assumption."""

    exit_code = 2


class PreconditionError(DFLError):
    """Raised when an operation is called outside its stated preconditions."""

    exit_code = 2


class ArtifactWriteError(DFLError):
    """Raised when an output file cannot be written."""

    exit_code = 2


class BoundViolationError(DFLError):
    """Raised when a certified run breaks one of the convergence bounds."""

    exit_code = 3


class NumericOverflowError(DFLError):
    """Raised when a client produces a non-finite gradient.

    Attributes:
        epoch: Epoch in which the failure happened
        server_id: 1-based server index
        client_id: 1-based client index
        step: Client iteration within the epoch (0-based)
    """

    exit_code = 4

    def __init__(
        self,
        message: str,
        *,
        epoch: int | None = None,
        server_id: int | None = None,
        client_id: int | None = None,
        step: int | None = None,
    ) -> None:
        super().__init__(message)
        self.epoch = epoch
        self.server_id = server_id
        self.client_id = client_id
        self.step = step
