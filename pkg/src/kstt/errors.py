"""Exception types shared across the package."""


class ShapeMismatch(ValueError):
    """Tensor operation received incompatibly shaped operands."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class IngestError(ValueError):
    """Malformed or inconsistent input data; message carries location info."""


class SamplingError(RuntimeError):
    """A sampling request cannot be satisfied (e.g. no candidate entities)."""
