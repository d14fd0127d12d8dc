"""One-shot 3D-aware head reenactment on tri-plane radiance fields.

Subpackages map to the pipeline: geometry (poses/cameras/rays), triplane
(representation + differentiable rendering), lifting (image -> tri-plane,
neutralizer), expression (driver encoding + injection), synthdata (the
procedural head world), training (losses + stages + checkpoints),
telepresence (wire protocol + session simulator), metrics (evaluation).
"""

from .errors import (
    FormatError,
    InvalidArgumentError,
    InvalidStateError,
    NumericFailureError,
    ProtocolError,
    TrifaceError,
)

__all__ = [
    "FormatError",
    "InvalidArgumentError",
    "InvalidStateError",
    "NumericFailureError",
    "ProtocolError",
    "TrifaceError",
]

__version__ = "0.1.0"
