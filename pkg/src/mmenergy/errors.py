"""Exception types shared across the toolkit."""


class InputError(ValueError):
    """Malformed runtime input: bad batch shape, value range, unknown token."""


class ConfigError(ValueError):
    """Invalid or internally inconsistent configuration."""


class CheckpointError(RuntimeError):
    """Unreadable, truncated, or version-incompatible checkpoint file."""


class NumericsError(RuntimeError):
    """Non-finite value produced where the computation guarantees finiteness."""
