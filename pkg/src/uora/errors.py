"""Exception types shared across the toolkit."""


class UoraError(Exception):
    """Base class for toolkit errors."""


class ShapeError(UoraError, ValueError):
    """Operand dimensions do not line up."""


class ConfigError(UoraError, ValueError):
    """A configuration value is out of range or names something that does not exist."""


class BoundsError(UoraError, IndexError):
    """An index falls outside the valid range."""


class DecodeError(UoraError):
    """A checkpoint file is corrupt or truncated.

    ``section`` names the part of the file that failed to decode.
    """

    def __init__(self, section, message):
        super().__init__(f"[{section}] {message}")
        self.section = section


class VersionError(UoraError):
    """A checkpoint was written by an incompatible format version."""


class DivergenceError(UoraError, FloatingPointError):
    """Training produced a non-finite loss."""

    def __init__(self, step, layer, message=""):
        text = f"non-finite loss at step {step} (layer {layer})"
        if message:
            text += f": {message}"
        super().__init__(text)
        self.step = step
        self.layer = layer


class ChecksumError(UoraError):
    """Reconstructed matrices do not match the checksums stored with them."""

    def __init__(self, layer, dims, message):
        super().__init__(message)
        self.layer = layer
        self.dims = dims
