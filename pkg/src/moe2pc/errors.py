"""Exception types raised across the package."""


class Moe2pcError(Exception):
    """Base class for library errors."""


class ShapeError(Moe2pcError, ValueError):
    pass


class ScaleError(Moe2pcError, ValueError):
    pass


class BoundsError(Moe2pcError, ValueError):
    pass


class SessionClosedError(Moe2pcError, RuntimeError):
    pass


class TripleExhaustedError(Moe2pcError, RuntimeError):
    pass


class PolicyError(Moe2pcError, PermissionError):
    """Raised when a session policy forbids an operation (e.g. declassify)."""


class CapacityError(Moe2pcError, ValueError):
    """A packed column does not fit into the ciphertext slot count."""


class ConfigError(Moe2pcError, ValueError):
    """Invalid experiment/model/cost-model file.

    ``field`` names the offending key path, ``line`` the 1-based source line
    when it could be located.
    """

    def __init__(self, message, field=None, line=None):
        self.field = field
        self.line = line
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field '{field}'")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)
