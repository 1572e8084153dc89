"""Exception types shared across the package."""


class InvalidArgument(ValueError):
    pass


class NumericalFailure(FloatingPointError):
    """Raised when an iterative procedure produces non-finite values."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class ContractViolation(RuntimeError):
    pass


class ConfigurationError(RuntimeError):
    pass


class CheckpointFormatError(IOError):
    """Corrupt or truncated checkpoint archive. ``tensor`` names the offending entry."""

    def __init__(self, message, tensor=None):
        super().__init__(message)
        self.tensor = tensor


class BackendError(RuntimeError):
    def __init__(self, message, sample_id=None):
        super().__init__(message if sample_id is None else f"[{sample_id}] {message}")
        self.sample_id = sample_id
