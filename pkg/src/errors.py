"""Exception hierarchy for the phenotype pipeline.

Each error class carries the process exit code that ``main.py`` reports for it.
"""


class PipelineError(Exception):
    """Base class for all pipeline errors."""

    exit_code = 1


class ConfigError(PipelineError, ValueError):
    """Invalid or missing configuration, or an unusable command-line flag."""

    exit_code = 2


class VariantStageError(ConfigError):
    """A stage was requested that the selected experiment variant does not have."""


class CohortValidationError(PipelineError, ValueError):
    """A cohort-level file (schema, manifest) is malformed. Fatal at load time."""

    exit_code = 2


class RecordRejected(PipelineError):
    """A single subject failed validation and is excluded from the cohort."""

    def __init__(self, subject_id: str, reason: str):
        super().__init__(f"{subject_id}: {reason}")
        self.subject_id = subject_id
        self.reason = reason


class NumericalDivergenceError(PipelineError, FloatingPointError):
    """A training loss became NaN or infinite."""

    exit_code = 3


class FingerprintMismatchError(PipelineError):
    """A checkpoint was produced under a different configuration or schema."""

    exit_code = 4

    def __init__(self, path: str, expected: str, found: str):
        super().__init__(
            f"Fingerprint mismatch for {path}: expected {expected}, found {found}"
        )
        self.path = path
        self.expected = expected
        self.found = found
