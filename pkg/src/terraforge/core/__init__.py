"""Shared geometry and raster primitives used by every stage."""

from .camera import WORLD_EAST, WORLD_NORTH, WORLD_UP, CameraView, Intrinsics, look_at
from .encoding import resolution_embedding
from .mesh import FACE_HORIZONTAL, FACE_VERTICAL, TexturedMesh, face_normal, face_normals
from .raster import RasterGrid, bilinear_sample, load_raster_png, save_raster_png

__all__ = [
    "WORLD_EAST",
    "WORLD_NORTH",
    "WORLD_UP",
    "CameraView",
    "Intrinsics",
    "look_at",
    "resolution_embedding",
    "FACE_HORIZONTAL",
    "FACE_VERTICAL",
    "TexturedMesh",
    "face_normal",
    "face_normals",
    "RasterGrid",
    "bilinear_sample",
    "load_raster_png",
    "save_raster_png",
]
