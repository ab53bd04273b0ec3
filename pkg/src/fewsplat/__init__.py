"""Few-view 3D Gaussian splatting with depth-prior regularization."""

__version__ = "0.1.0"

from .camera import CameraModel, look_at
from .errors import (
    DegenerateParameterError,
    FewsplatError,
    MismatchedIntermediatesError,
    NonFiniteLossError,
    ValidationError,
)
from .scene import GaussianCloud, covariance_from_params, load_ply, save_ply

__all__ = [
    "CameraModel",
    "DegenerateParameterError",
    "FewsplatError",
    "GaussianCloud",
    "MismatchedIntermediatesError",
    "NonFiniteLossError",
    "ValidationError",
    "covariance_from_params",
    "load_ply",
    "look_at",
    "save_ply",
    "__version__",
]
