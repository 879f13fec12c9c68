"""Exception types shared across the pipeline."""


class CicmapError(Exception):
    """Base class for all pipeline-specific errors."""


class InputFormatError(CicmapError):
    """Input that cannot be parsed (bad header, malformed row, bad raster).

    ``line`` is the 1-based line number for file inputs, or None.
    """

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ValidationError(CicmapError):
    """Parseable input whose values violate the data contract."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class EmptyModelError(CicmapError):
    """Fitting accepted no evidence features (insufficient or non-separable training patches)."""


class ConfigurationError(CicmapError):
    """Incompatible configuration between pipeline stages (e.g. patch-size mismatch)."""


class SelectionStateError(CicmapError):
    """A selection criterion was invoked in a state where it is not applicable."""


class EvaluationError(CicmapError):
    """Evaluation impossible on the given data (e.g. single-class ROC)."""


class SyntheticSpecError(CicmapError):
    """Synthetic slide specification is invalid or infeasible."""
