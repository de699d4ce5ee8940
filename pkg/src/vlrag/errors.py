"""Exception hierarchy shared across the package."""


class VlragError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(VlragError, ValueError):
    pass


class DegenerateVectorError(VlragError, ValueError):
    """Zero-norm or non-finite vector where a direction is required."""


class EmptyInputError(VlragError, ValueError):
    pass


class ShapeError(VlragError, ValueError):
    pass


class FormatError(VlragError):
    """File has the wrong magic bytes or an unsupported version."""


class CorruptFileError(VlragError):
    """File is truncated, padded, or fails its checksum."""


class DuplicateIdError(VlragError, KeyError):
    pass


class EmptyIndexError(VlragError):
    pass


class IndexStateError(VlragError):
    """Insert after freeze, or save before freeze."""


class NotFoundError(VlragError, KeyError):
    pass


class AlignmentError(VlragError):
    """Index and entity store do not cover the same ids."""


class ExhaustedStoreError(VlragError):
    """No record is eligible for mismatched sampling."""


class BackendError(VlragError):
    """A text-retrieval backend failed; ``__cause__`` holds the transport error."""


class ParseError(VlragError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
