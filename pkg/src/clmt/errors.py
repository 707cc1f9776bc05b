"""Exception taxonomy shared across the package.

Each class maps to a distinct CLI exit code (see clmt.cli.EXIT_CODES).
"""


class ClmtError(Exception):
    """Base class for all package errors."""


class ConfigError(ClmtError):
    """Bad or inconsistent configuration (files, flags, hyperparameters)."""


class DataError(ClmtError):
    """Bad input data: shapes, rates, empty datasets, degenerate windows."""


class FreezeViolationError(ClmtError):
    """A frozen component was mutated or an unfrozen one used where a frozen
    one is required."""


class NumericError(ClmtError):
    """Non-finite losses or values encountered during training/evaluation."""


class CheckpointError(ClmtError):
    """Missing checkpoint or checkpoint of the wrong component kind."""


class DigestError(CheckpointError):
    """Checkpoint or report content digest verification failed."""


class SchemaVersionError(CheckpointError):
    """Serialized artifact carries an unsupported schema/format version."""
