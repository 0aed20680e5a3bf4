"""
Custom Exceptions
=================
Application-specific exceptions for better error handling.

Every exception carries an ``exit_code`` used by the management commands:
2 for configuration/usage errors, 3 for data/schema errors, 4 for runtime failures.
"""


class UpliftEngineBaseException(Exception):
    """Base exception for all uplift engine errors."""

    exit_code = 4

    def __init__(self, message: str, code: str = None, details: dict = None):
        super().__init__(message)
        self.message = message
        self.code = code or 'UNKNOWN_ERROR'
        self.details = details or {}

    def to_dict(self) -> dict:
        return {
            'error': self.code,
            'message': self.message,
            'details': self.details,
        }


# =============================================================================
# CONFIGURATION EXCEPTIONS
# =============================================================================

class ConfigurationError(UpliftEngineBaseException):
    """Raised when a run configuration is missing, malformed or inconsistent."""

    exit_code = 2

    def __init__(self, message: str, key: str = None):
        super().__init__(message, 'CONFIGURATION_ERROR', {'key': key})
        self.key = key


class UsageError(ConfigurationError):
    """Raised when a command is invoked without something it requires."""

    def __init__(self, message: str, key: str = None):
        super().__init__(message, key)
        self.code = 'USAGE_ERROR'


# =============================================================================
# DATA EXCEPTIONS
# =============================================================================

class DataException(UpliftEngineBaseException):
    """Base exception for dataset related errors."""

    exit_code = 3


class DataSchemaError(DataException):
    """Raised when a dataset does not match the expected schema or model dimensions."""

    def __init__(self, message: str, column: str = None, details: dict = None):
        details = dict(details or {})
        details['column'] = column
        super().__init__(message, 'DATA_SCHEMA_ERROR', details)
        self.column = column


class DataValidationError(DataException):
    """Raised when individual samples violate dataset invariants."""

    def __init__(self, message: str, row: int = None, line: int = None):
        super().__init__(
            message,
            'DATA_VALIDATION_ERROR',
            {'row': row, 'line': line}
        )
        self.row = row
        self.line = line


class DataProcessingError(DataException):
    """Raised when data processing fails."""

    def __init__(self, message: str, step: str = None):
        super().__init__(
            message,
            'DATA_PROCESSING_ERROR',
            {'step': step}
        )


class SpecError(DataException):
    """Raised when a synthetic generator spec or split request is invalid."""

    def __init__(self, message: str, field: str = None):
        super().__init__(message, 'SPEC_ERROR', {'field': field})
        self.field = field


# =============================================================================
# NUMERIC CORE / MODEL EXCEPTIONS
# =============================================================================

class ShapeError(UpliftEngineBaseException):
    """Raised when operands of a numeric operation have incompatible shapes."""

    def __init__(self, message: str, left: tuple = None, right: tuple = None):
        super().__init__(
            message,
            'SHAPE_ERROR',
            {'left': left, 'right': right}
        )
        self.left = left
        self.right = right


class ContractError(UpliftEngineBaseException):
    """Raised when a caller violates an operation precondition."""

    def __init__(self, message: str, details: dict = None):
        super().__init__(message, 'CONTRACT_ERROR', details)


class IndexOutOfRangeError(ContractError):
    """Raised for task or treatment indices outside the configured range."""

    def __init__(self, kind: str, index: int, limit: int):
        super().__init__(
            f"{kind} index {index} out of range [0, {limit})",
            {'kind': kind, 'index': index, 'limit': limit}
        )
        self.code = 'INDEX_OUT_OF_RANGE'


class ModelNotFittedError(ContractError):
    """Raised when scoring is attempted with a model that has no parameters."""

    def __init__(self, method: str):
        super().__init__(
            f"Model '{method}' has not been fitted",
            {'method': method}
        )
        self.code = 'MODEL_NOT_FITTED'


class CheckpointError(ContractError):
    """Raised when a checkpoint cannot be read or does not match the run."""

    def __init__(self, message: str, details: dict = None):
        super().__init__(message, details)
        self.code = 'CHECKPOINT_ERROR'


# =============================================================================
# METRIC EXCEPTIONS
# =============================================================================

class MetricError(UpliftEngineBaseException):
    """Raised when an uplift metric is undefined for the given cohort."""

    def __init__(self, message: str, treatment: int = None, task: int = None):
        super().__init__(
            message,
            'METRIC_ERROR',
            {'treatment': treatment, 'task': task}
        )
        self.treatment = treatment
        self.task = task
