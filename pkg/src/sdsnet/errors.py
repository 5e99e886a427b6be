class ConfigError(ValueError):
    """Invalid configuration value. ``field`` names the offending key."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    """NaN/Inf produced by a block; ``where`` names the producer."""

    def __init__(self, where, message=None):
        self.where = where
        super().__init__(message or f"non-finite values produced by {where}")


class DataError(ValueError):
    pass
