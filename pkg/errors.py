"""
Exception types shared by the pacing optimizer modules.
The CLI maps each family to an exit code.
"""

from typing import Optional


class PacerError(Exception):
    """Base class for every error the tool reports to the user"""

    exit_code = 1


class InputError(PacerError, ValueError):
    """A file or record could not be parsed or failed validation"""

    exit_code = 3

    def __init__(self, message: str, source: Optional[str] = None, record: Optional[int] = None):
        self.source = source
        self.record = record
        where = ""
        if source is not None:
            where = f"{source}: "
            if record is not None:
                where = f"{source} (record {record}): "
        super().__init__(f"{where}{message}")


class TableFormatError(InputError):
    """Saved value tables are truncated or not in the expected container format"""


class InfeasiblePlanError(PacerError):
    """No admissible pacing plan exists from the requested start state"""

    exit_code = 4

    def __init__(self, message: str, stage: Optional[int] = None):
        self.stage = stage
        if stage is not None:
            message = f"{message} (first infeasible stage: {stage})"
        super().__init__(message)


class FingerprintMismatchError(PacerError):
    """Value tables were solved for a different rider, course or solver setup"""

    exit_code = 5

    def __init__(self, field: str, expected: str, found: str, source: Optional[str] = None):
        self.field = field
        self.expected = expected
        self.found = found
        prefix = f"{source}: " if source else ""
        super().__init__(f"{prefix}{field} fingerprint mismatch (expected {expected}, found {found})")


class UsageError(PacerError, ValueError):
    """Command-line flags that parse but cannot be used together"""

    exit_code = 2
