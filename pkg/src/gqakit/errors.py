"""Exception types shared across the toolkit."""


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class ConfigError(ValueError):
    """Invalid configuration (model, search, or task)."""


class InputError(ValueError):
    """Invalid runtime input (tokens out of range, empty batch, ...)."""


class GroupingError(ValueError):
    """A head grouping violates the partition contract."""


class PlanError(ValueError):
    """Per-layer grouping plans are missing, duplicated, or inconsistent."""


class BudgetError(RuntimeError):
    """An enumeration exceeds its configured cap."""


class OracleError(RuntimeError):
    """The accuracy oracle returned a non-finite value."""


class TrainingError(RuntimeError):
    """Optimization diverged (non-finite loss)."""


class CheckpointError(ValueError):
    """A checkpoint file is malformed or has an unsupported version."""
