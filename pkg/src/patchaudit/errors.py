"""Exception types shared across the package."""


class PatchAuditError(Exception):
    """Base class for all package errors."""


class ValidationError(PatchAuditError):
    """A config, spec, or argument failed validation before any work ran."""


class DatasetError(PatchAuditError):
    """On-disk dataset is missing, malformed, or inconsistent."""


class BuildError(PatchAuditError):
    """A model could not be constructed as configured."""


class TrainingError(PatchAuditError):
    """Training refused to start or diverged."""


class OracleError(PatchAuditError):
    """An oracle backend failed to answer a query."""


class OracleItemError(OracleError):
    """Some items of a batch were rejected; the rest were answered.

    `labels` holds the per-item results with None at failed slots,
    `failures` maps item index -> error message.
    """

    def __init__(self, message, labels, failures):
        super().__init__(message)
        self.labels = labels
        self.failures = failures


class StageError(PatchAuditError):
    """A pipeline stage failed; carries the stage name and a resume hint."""

    def __init__(self, stage, message, resume_hint=None):
        super().__init__(f"stage '{stage}' failed: {message}")
        self.stage = stage
        self.resume_hint = resume_hint
