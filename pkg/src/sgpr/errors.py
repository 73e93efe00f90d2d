"""Exception types raised across the toolkit."""


class SGPRError(Exception):
    """Base class for all toolkit errors."""


class MalformedFileError(SGPRError, ValueError):
    """A binary file does not have the expected size or layout."""


class MalformedRecordError(SGPRError, ValueError):
    """A record inside an otherwise well-sized file holds invalid values."""


class ParseError(SGPRError, ValueError):
    """A text document could not be parsed.

    ``location`` is a human-readable pointer (``file:line`` or a JSON path).
    """

    def __init__(self, message: str, location: str | None = None):
        self.location = location
        super().__init__(f"{location}: {message}" if location else message)


class ValidationError(ParseError):
    """A document parsed but holds out-of-range values."""


class InconsistentDatasetError(SGPRError, ValueError):
    """Companion dataset files disagree (e.g. pose and timestamp counts)."""


class DatasetError(SGPRError, FileNotFoundError):
    """A required dataset file or directory is missing."""


class DomainError(SGPRError, ValueError):
    """An argument lies outside the operation's domain."""


class ShapeError(SGPRError, ValueError):
    """Tensor shapes are incompatible for an operation."""


class ContractError(SGPRError, RuntimeError):
    """A documented precondition of an API call was violated."""


class CapacityError(SGPRError, ValueError):
    """A graph has more nodes than the configured capacity."""


class DegenerateDatasetError(SGPRError, ValueError):
    """Training data cannot support learning (e.g. a single label)."""


class DegenerateEvalError(SGPRError, ValueError):
    """Evaluation labels contain only one class."""


class FormatError(SGPRError, ValueError):
    """A checkpoint container has the wrong magic or format version."""
