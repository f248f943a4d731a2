class ConfigError(ValueError):
    """Invalid configuration or command usage (CLI exit code 2)."""


class CheckpointError(RuntimeError):
    """Unreadable, corrupt, or incompatible checkpoint file."""
