"""Exception hierarchy shared by the library and the CLI."""


class LmKanError(Exception):
    """Base class for all library errors."""


class ConfigError(LmKanError, ValueError):
    """Invalid construction parameter or configuration field."""

    def __init__(self, message, field=None):
        super().__init__(message if field is None else f"{field}: {message}")
        self.field = field


class ShapeError(LmKanError, ValueError):
    """Array shapes do not match what an operation expects."""


class FusionError(LmKanError):
    """A block cannot be absorbed exactly (odd G, unsupported mode, missing stats)."""


class FormatError(LmKanError):
    """A model file has the wrong magic, version or header structure."""


class CorruptFileError(FormatError):
    """A model file is truncated or its payload disagrees with its header."""


class TrainingDivergedError(LmKanError, FloatingPointError):
    """Loss became NaN or infinite during training."""

    def __init__(self, phase, step, pure_loss, total_loss):
        super().__init__(
            f"non-finite loss in phase {phase} at step {step} "
            f"(pure={pure_loss!r}, total={total_loss!r})"
        )
        self.phase = phase
        self.step = step
