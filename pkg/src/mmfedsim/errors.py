"""Exception types shared across the simulator."""


class DimensionError(ValueError):
    """Array or layer shapes do not chain."""


class NumericError(ArithmeticError):
    """A NaN or infinity appeared where finite values are required."""


class ConfigError(ValueError):
    """Invalid configuration value.

    ``field`` holds a dotted path to the offending entry (e.g. ``fl.rounds``)
    so the CLI can point at it.
    """

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field
        self.message = message


class AugmentationUnavailable(Exception):
    """Raised when modality dropout needs at least two present modalities."""
