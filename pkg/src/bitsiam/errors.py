"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class CheckpointError(RuntimeError):
    """A checkpoint file or archive is malformed or does not fit the target."""


class IntegrityError(CheckpointError):
    """Stored bytes disagree with the header that describes them."""


class SurgeryError(CheckpointError):
    """Weight surgery cannot be applied to the given checkpoint."""


class TrainingAborted(RuntimeError):
    """Training stopped on a non-finite loss; a diagnostic state was saved."""

    def __init__(self, message, state_path=None):
        super().__init__(message)
        self.state_path = state_path
