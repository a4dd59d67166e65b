class G2CError(Exception):
    """Base error for the pipeline"""


class ShapeError(G2CError):
    """Operand shapes are incompatible"""


class NonFiniteError(G2CError):
    """A NaN or Inf appeared while checked mode was on"""


class TapeError(G2CError):
    """Misuse of a differentiation tape"""


class ConfigError(G2CError):
    """Invalid or inconsistent configuration"""


class UsageError(G2CError):
    """Bad command line"""


class CorpusError(G2CError):
    """Synthetic corpus could not be produced"""


class ManifestError(G2CError):
    """Malformed manifest content"""

    def __init__(self, message, line_number=None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class CheckpointError(G2CError):
    """Checkpoint could not be read or written"""


class CorruptHeaderError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedPayloadError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


class ArchitectureMismatchError(CheckpointError):
    pass


class TrainingDivergedError(G2CError):
    """Loss became non-finite during training"""


class EvaluationError(G2CError):
    pass


class AblationError(G2CError):
    """A grid row failed; the message names the row"""

    def __init__(self, row, cause):
        super().__init__(f"ablation row {row} failed: {cause}")
        self.row = row
