"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor/layer shape mismatch, with a dimension report in the message."""


class RoleError(ValueError):
    """A model file or object was used in a role it was not built for."""


class FormatError(ValueError):
    """Corrupt or incompatible serialized artifact."""


class ConfigError(ValueError):
    """Invalid run configuration (unknown key, bad value, parse failure)."""


class DivergenceError(RuntimeError):
    """Training diverged (NaN loss or loss explosion)."""
