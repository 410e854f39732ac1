"""Error types shared across modules (CLI maps these to exit codes)."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration (exit code 2)."""


class DataError(ValueError):
    """Malformed dataset, spectrogram, or checkpoint file (exit code 3)."""
