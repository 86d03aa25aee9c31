"""Exception types shared across the package."""


class CycleformerError(Exception):
    """Base class so callers can catch everything package-specific at once."""


class ShapeError(CycleformerError, ValueError):
    """Operand shapes or dtypes are incompatible with the requested op."""


class ConfigError(CycleformerError, ValueError):
    """A run or model configuration is malformed or inconsistent."""


class DataError(CycleformerError, ValueError):
    """Corpus or batch construction cannot proceed (too short, bad ids)."""


class UsageError(CycleformerError, RuntimeError):
    """An API was called out of contract (e.g. backward on an off-tape value)."""


class CheckpointError(CycleformerError, ValueError):
    """Checkpoint container is unreadable."""


class CheckpointMagicError(CheckpointError):
    """File does not start with the expected magic bytes."""


class CheckpointVersionError(CheckpointError):
    """Container version is not one this reader understands."""


class TrainingDiverged(CycleformerError, RuntimeError):
    """Loss became non-finite during training."""

    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} at step {step}")
        self.step = step
        self.loss = loss
