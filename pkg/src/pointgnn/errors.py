class PointGnnError(Exception):
    """Base class for data-level failures (CLI exit status 2)."""


class FormatError(PointGnnError):
    """Malformed input file or byte payload."""


class TrainingError(PointGnnError):
    """Non-finite loss or gradient during training."""


class GenerationError(PointGnnError):
    """Synthetic scene placement failed after bounded retries."""
