"""Exception hierarchy shared across the package."""


class FedTVError(Exception):
    """Base class for all errors raised by fedtv."""


class StructuralError(FedTVError, ValueError):
    """Shape, partition, mask or index mismatch between inputs."""


class AggregationInvariantError(FedTVError, RuntimeError):
    """An aggregation invariant that should be impossible to break was broken."""


class TrainingError(FedTVError, RuntimeError):
    """Local training diverged or produced non-finite values."""

    def __init__(self, message: str, *, client_id: int | None = None, round_index: int | None = None):
        self.client_id = client_id
        self.round_index = round_index
        context = []
        if round_index is not None:
            context.append(f"round={round_index}")
        if client_id is not None:
            context.append(f"client={client_id}")
        if context:
            message = f"{message} [{', '.join(context)}]"
        super().__init__(message)


class ConfigError(FedTVError, ValueError):
    """Invalid experiment configuration. ``field`` names the offending key path."""

    def __init__(self, message: str, *, field: str | None = None, line: int | None = None):
        self.field = field
        self.line = line
        where = []
        if field:
            where.append(f"field '{field}'")
        if line is not None:
            where.append(f"line {line}")
        prefix = f"{' at '.join(where)}: " if where else ""
        super().__init__(prefix + message)
