"""User-centric personalized federated learning simulator."""

from .errors import ConfigError, FormatError, NumericError, StructuralError, UCFLError, ValidationError

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "FormatError",
    "NumericError",
    "StructuralError",
    "UCFLError",
    "ValidationError",
]
