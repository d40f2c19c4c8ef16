"""3D head modeling and pose manipulation by direct per-instance energy minimization."""

__version__ = "0.1.0"

from .geometry import Camera, Pose
from .model import FaceCoefficients, MorphableModel, load_model, save_model, synthesize_model

__all__ = [
    "Camera",
    "Pose",
    "FaceCoefficients",
    "MorphableModel",
    "load_model",
    "save_model",
    "synthesize_model",
]
