"""Exception types shared across the toolkit."""


class TelekinesisError(Exception):
    """Base class for all toolkit errors."""


class InvalidInputError(TelekinesisError, ValueError):
    """Inputs violate a documented precondition (shape, finiteness, range)."""


class DegenerateConfigurationError(TelekinesisError):
    """Geometry is rank-deficient and the requested quantity is not determined."""


class ModelParseError(TelekinesisError, ValueError):
    """A chain/skeleton/geometry document violates its schema.

    Carries enough context (field path, offending value) to locate the error
    in the source document.
    """

    def __init__(self, message, *, field=None, path=None):
        ctx = []
        if path is not None:
            ctx.append(str(path))
        if field is not None:
            ctx.append(f"field {field!r}")
        prefix = " (".join([""] + ctx) + ")" * len(ctx) if ctx else ""
        super().__init__(message + prefix)
        self.field = field
        self.path = path


class StreamFormatError(TelekinesisError, ValueError):
    """A JSONL pose/command stream is malformed; carries the 1-based line number."""

    def __init__(self, message, *, line=None, path=None):
        loc = ""
        if path is not None and line is not None:
            loc = f" ({path}:{line})"
        elif line is not None:
            loc = f" (line {line})"
        super().__init__(message + loc)
        self.line = line
        self.path = path


class SolverError(TelekinesisError):
    """An iterative solver produced non-finite values; message carries diagnostics."""


class TrainingError(TelekinesisError):
    """Training preconditions violated (empty/single-class data, missing classifier)."""


class NonFiniteLossError(TrainingError):
    """Loss became NaN/inf during training; records epoch and batch."""

    def __init__(self, message, *, epoch=None, batch=None):
        where = ""
        if epoch is not None:
            where = f" (epoch {epoch}" + (f", batch {batch}" if batch is not None else "") + ")"
        super().__init__(message + where)
        self.epoch = epoch
        self.batch = batch


class PipelineError(TelekinesisError):
    """A pipeline node failed; the graph shut down and flushed partial telemetry."""


class ConfigError(TelekinesisError, ValueError):
    """Layered configuration is invalid (unknown key, bad type, missing file)."""
