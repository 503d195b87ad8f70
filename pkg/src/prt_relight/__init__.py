"""Inverse rendering with spherical-harmonic light transport fields."""
from .sh import ShIllumination, ShVector
from .scene import Camera, SceneDataset, load_scene, save_scene
from .transport import MaterialTextures, TransportField

__version__ = "0.1.0"

__all__ = ["Camera", "MaterialTextures", "SceneDataset", "ShIllumination", "ShVector", "TransportField",
           "load_scene", "save_scene"]
