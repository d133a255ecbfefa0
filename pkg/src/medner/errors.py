"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes: FormatError and subclasses are data
problems (exit 3), NumericalError covers divergence/NaN (exit 4), and
plain ValueError is treated as a usage error (exit 2).
"""


class MednerError(Exception):
    """Base class for all toolkit errors."""


class FormatError(MednerError):
    """Malformed input data: corpus files, tags, vocabularies, results files."""


class BioViolationError(FormatError):
    """Strict BIO validation failed.

    Carries the offending token index so callers can point at the exact
    position in the record.
    """

    def __init__(self, message: str, index: int):
        super().__init__(message)
        self.index = index


class CheckpointError(FormatError):
    """Checkpoint file is unreadable: bad version, shape mismatch, truncation."""


class NumericalError(MednerError):
    """Non-finite values where finite ones are required."""


class DivergenceError(NumericalError):
    """Training produced a non-finite loss or gradient and was aborted."""
