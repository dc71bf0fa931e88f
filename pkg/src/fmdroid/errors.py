"""Exception hierarchy shared across the package."""


class FmdroidError(Exception):
    """Base class for all errors raised by fmdroid."""

    #: short machine-readable code used by the CLI
    code = "error"


class DatasetFormatError(FmdroidError):
    code = "dataset_format"

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ManifestParseError(FmdroidError):
    code = "manifest_parse"

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)


class DictionaryError(FmdroidError):
    code = "dictionary"


class DimensionMismatchError(FmdroidError):
    code = "dimension_mismatch"


class DegenerateLabelsError(FmdroidError):
    code = "degenerate_labels"


class ModelFormatError(FmdroidError):
    code = "model_format"


class InfeasibleSpecError(FmdroidError):
    code = "infeasible_spec"
