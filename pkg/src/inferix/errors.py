"""Exception hierarchy shared across the engine."""


class InferixError(Exception):
    """Base class for all engine errors."""


class DimensionError(InferixError, ValueError):
    """Tensor shapes are inconsistent with the operation's contract."""


class MaskError(InferixError, ValueError):
    """An attention mask is malformed (e.g. a fully masked query row)."""


class CapacityError(InferixError, RuntimeError):
    """Both KV cache tiers are exhausted."""


class OutOfRangeError(InferixError, IndexError):
    """A requested token range or index is not addressable."""


class ConfigError(InferixError, ValueError):
    """Invalid configuration value."""


class ProtocolError(InferixError, ValueError):
    """Malformed wire message (bad magic, version, or checksum)."""


class NeedMoreData(InferixError):
    """The byte buffer ends mid-message; retry once more bytes arrive."""
