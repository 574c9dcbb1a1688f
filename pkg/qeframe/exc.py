"""Custom exceptions."""


class QEFrameException(Exception):
    """Base class of every error raised by qeframe."""


class ContractError(QEFrameException):
    """Raised when a caller violates an operation's precondition."""


class ShapeError(ContractError):
    """Raised when tensor shapes are incompatible."""


class DegenerateInputError(QEFrameException):
    """Raised for inputs an operation is undefined on (zero vectors, all-pad masks)."""


class ConfigurationError(QEFrameException):
    """Raised when a configuration value or config file is invalid."""


class DataError(QEFrameException):
    """Base class for problems with input data."""


class EmptyCorpusError(DataError):
    """Raised when a vocabulary is built from an empty corpus."""


class EmptyFileError(DataError):
    """Raised when a TSV file has no header row."""


class MissingColumnError(DataError):
    """Raised when a mapped column is absent from a TSV header."""


class EncodingError(DataError):
    """Raised when a file is not valid UTF-8."""


class MalformedRowError(DataError):
    """Raised when a TSV row does not have as many fields as the header."""


class LabelParseError(DataError):
    """Raised when a label cannot be parsed as a finite real number."""


class LanguagePairError(DataError):
    """Raised when a language-pair tag is not of the form `xx-yy`."""


class UnsupportedGroupingError(DataError):
    """Raised when directional grouping meets a pair without English on either side."""


class InsufficientDataError(DataError):
    """Raised when there are too few (or too uniform) rows for an operation."""


class UndefinedCorrelationError(QEFrameException):
    """Raised when a correlation is requested for a zero-variance vector."""


class PredictionError(QEFrameException):
    """Raised when predicting a record fails; the message names the record index."""


class NumericError(QEFrameException):
    """Raised when training produces a non-finite loss."""


class CheckpointError(QEFrameException):
    """Base class for checkpoint persistence problems."""


class CheckpointVersionError(CheckpointError):
    """Raised when a checkpoint has an unknown magic or format version."""


class CheckpointShapeError(CheckpointError):
    """Raised when a checkpoint manifest disagrees with its encoder config."""


class CheckpointTruncatedError(CheckpointError):
    """Raised when a checkpoint ends before its weight blob does."""
