"""Exception taxonomy shared by the whole package.

Every error a caller can act on maps to one of these four classes. The CLI
translates them to exit codes; library users catch them directly.
"""


class ConfigError(ValueError):
    """Invalid configuration or arguments: bad shapes, unknown names,
    out-of-range hyperparameters. CLI exit code 2."""


class DataError(ValueError):
    """Invalid data at runtime: token ids out of vocabulary, malformed
    sequences, corrupt checkpoint payloads."""


class MissingArtifactError(FileNotFoundError):
    """A required input artifact (checkpoint, dataset file) does not exist.
    CLI exit code 3."""


class NumericsError(ArithmeticError):
    """Non-finite values where finite ones are required: NaN/Inf loss,
    overflowing gradients. CLI exit code 4."""


def require(cond: bool, exc: type, msg: str) -> None:
    """Raise exc(msg) unless cond holds. Keeps precondition checks one-line."""
    if not cond:
        raise exc(msg)
