"""Exception hierarchy.

Every error raised on purpose by the toolkit derives from ``TrafficAttackError``.
The CLI maps the three families below onto exit codes (data errors exit 2,
numeric errors exit 3, everything else that is a usage problem exits 1).
"""


class TrafficAttackError(Exception):
    """Base class for toolkit errors."""


# -- usage / contract -------------------------------------------------------


class ContractError(TrafficAttackError, ValueError):
    """A caller broke a documented precondition."""


class DimensionError(ContractError):
    """Tensor shapes are incompatible for the requested operation."""


class ConfigurationError(ContractError):
    """Invalid configuration values (fractions, budgets, hyperparameters)."""


class DependencyError(TrafficAttackError):
    """A pipeline stage ran before the stage that produces its inputs."""


# -- data -------------------------------------------------------------------


class DataError(TrafficAttackError):
    """Problem with input data or persisted artifacts."""


class IngestionError(DataError):
    """A CSV cell is missing, unparsable or negative."""


class SchemaError(DataError):
    """A CSV header does not match the documented layout."""


class InsufficientDataError(DataError):
    """Too few timesteps to build a single window."""


class DegenerateDataError(DataError):
    """Statistics collapse (zero spread) so the requested transform is undefined."""


class CoverageError(DataError):
    """Historical-average history does not reach back far enough."""


class FormatError(DataError):
    """A model or log file is truncated, corrupt, or of an unknown version."""


class ProtocolError(DataError):
    """An oracle request or response does not follow the wire contract."""


class TransportError(TrafficAttackError):
    """The oracle could not be reached. Retrying may succeed."""


class CollectionError(TrafficAttackError):
    """Oracle collection stopped part way; a checkpoint was written."""

    def __init__(self, message: str, completed: int, checkpoint=None):
        super().__init__(message)
        self.completed = completed
        self.checkpoint = checkpoint


class QueryBudgetExceeded(TrafficAttackError):
    """The endpoint's configured query budget is used up."""


# -- numerics ---------------------------------------------------------------


class NumericError(TrafficAttackError, ArithmeticError):
    """NaN or infinity appeared in a computation."""


class SingularSystemError(NumericError):
    """A least-squares system is rank deficient."""


class DivergenceError(NumericError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, epoch: int):
        super().__init__(message)
        self.epoch = epoch
