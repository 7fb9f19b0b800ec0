"""Exception types shared across the toolkit."""


class EquantError(Exception):
    """Base class for all toolkit errors."""


class ShapeMismatchError(EquantError):
    """Tensor shapes are incompatible; the message names the offending dimension."""


class NumericError(EquantError):
    """Non-finite values or otherwise unusable numerics."""


class GraphError(EquantError):
    """Invalid graph topology, wiring or node lookup."""


class CalibrationError(EquantError):
    """Missing or unusable calibration statistics."""


class EligibilityError(EquantError):
    """A layer cannot be factorized; carries the machine-readable skip reason."""

    def __init__(self, layer_id: str, reason: str):
        super().__init__(f"layer {layer_id!r} is not eligible for factorization: {reason}")
        self.layer_id = layer_id
        self.reason = reason


class ModelFormatError(EquantError):
    """Malformed model manifest, weight blob or sidecar."""


class SampleStreamError(EquantError):
    """Sample stream is empty or shorter than required."""


class ConfigError(EquantError):
    """Invalid pipeline configuration."""
