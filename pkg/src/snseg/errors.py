"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Invalid input data or arguments (CLI exit code 1)."""


class ConfigError(ValidationError):
    """Invalid or unknown configuration keys."""


class GenerationError(RuntimeError):
    """Phantom geometry could not satisfy its invariants."""


class CheckpointError(RuntimeError):
    """Checkpoint directory is missing, corrupt, or shape-incompatible."""


class TrainingDivergedError(RuntimeError):
    """Non-finite loss encountered during training."""
