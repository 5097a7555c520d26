"""Exception hierarchy shared by every entmask module."""


class EntmaskError(Exception):
    """Base class for all library errors."""


class ConfigError(EntmaskError, ValueError):
    """Invalid configuration, plan or model/vocabulary pairing."""


class DataError(EntmaskError, ValueError):
    """Corpus ingestion or dataset problem (empty corpus, unlabeled rows, ...)."""


class DimensionError(EntmaskError, ValueError):
    """Tensor shapes do not agree for an operation."""


class ContractError(EntmaskError, RuntimeError):
    """A caller broke an operation's precondition."""


class SelectionError(EntmaskError, ValueError):
    """A mask selection request cannot be satisfied."""


class NonFiniteError(EntmaskError, FloatingPointError):
    """NaN or Inf observed while debug checking is enabled."""


class TrainingDivergedError(EntmaskError, FloatingPointError):
    """A training loss became non-finite. ``record`` holds the offending step."""

    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record


class CheckpointError(EntmaskError, IOError):
    """Base class for checkpoint load failures."""


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class SequenceTooLongError(ContractError):
    """Input longer than the model's position table; callers must truncate first."""
