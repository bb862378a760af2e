class TransmonNoiseError(Exception):
    """Base class for every failure raised by the toolkit."""


class SpecError(TransmonNoiseError, ValueError):
    pass


class IntegrationError(TransmonNoiseError, RuntimeError):
    """Raised when time propagation fails; `time_ns` and `trajectory` locate the failure."""

    def __init__(self, message, time_ns=None, trajectory=None):
        if time_ns is not None:
            message = f"{message} (t = {time_ns:.3f} ns)"
        super().__init__(message)
        self.time_ns = time_ns
        self.trajectory = trajectory


class SchemaError(TransmonNoiseError, ValueError):
    """Malformed data or configuration file; carries the line and field."""

    def __init__(self, message, line=None, field=None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field '{field}'")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.line = line
        self.field = field


class FitError(TransmonNoiseError, RuntimeError):
    def __init__(self, message, missing=()):
        if missing:
            message = f"{message}: missing {', '.join(missing)}"
        super().__init__(message)
        self.missing = tuple(missing)
