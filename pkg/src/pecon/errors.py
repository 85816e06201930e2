"""Exception types raised across the package."""


class PeconError(Exception):
    """Base class; ``kind`` is a short machine-readable tag used by the CLI."""

    kind = "error"


class ManifestError(PeconError, ValueError):
    kind = "manifest"

    def __init__(self, message, row=None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class DuplicatePatientError(ManifestError):
    kind = "duplicate-patient-id"


class WidthMismatchError(ManifestError):
    kind = "width-mismatch"


class MissingFileError(ManifestError):
    kind = "missing-file"


class FormatError(PeconError, ValueError):
    kind = "format"


class EmptyInputError(PeconError, ValueError):
    kind = "empty-input"


class DegenerateEmbeddingError(PeconError, ValueError):
    kind = "degenerate-embedding"


class DegenerateBatchError(PeconError, ValueError):
    kind = "degenerate-batch"


class ShapeError(PeconError, ValueError):
    kind = "shape-mismatch"


class CheckpointError(PeconError, ValueError):
    kind = "corrupt-checkpoint"


class ArchitectureMismatchError(PeconError, ValueError):
    kind = "architecture-mismatch"


class UndefinedAUROCError(PeconError, ValueError):
    kind = "undefined-auroc"


class ConfigError(PeconError, ValueError):
    kind = "config"


class MissingPrerequisiteError(PeconError, FileNotFoundError):
    kind = "missing-prerequisite"
