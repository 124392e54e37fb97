"""Textured triangle meshes in the world frame.

Vertices are meters in the right-handed z-up frame.  Faces are
counter-clockwise when seen from the outside (an upward-facing ground
triangle has normal +z).  Texturing is a single RGB atlas addressed by
per-face-corner UV coordinates in [0, 1]^2 with v running down the atlas
rows, matching raster storage order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ContractError, GeometryError
from .raster import RasterGrid

__all__ = [
    "FACE_HORIZONTAL",
    "FACE_VERTICAL",
    "TexturedMesh",
    "classify_faces",
    "face_normal",
    "face_normals",
]

FACE_HORIZONTAL = 0
FACE_VERTICAL = 1


@dataclass
class TexturedMesh:
    """Triangle mesh with a texture atlas and per-face classification.

    Attributes:
        vertices: (V, 3) float64 world positions in meters.
        faces: (F, 3) integer vertex indices, CCW from outside.
        uv: (F, 3, 2) per-corner atlas coordinates in [0, 1]^2.
        atlas: RGB texture atlas.
        face_class: (F,) uint8, FACE_HORIZONTAL or FACE_VERTICAL.
        face_textured: (F,) bool; untextured faces render with a fill
            color until baking assigns them a chart.
    """

    vertices: np.ndarray
    faces: np.ndarray
    uv: np.ndarray
    atlas: RasterGrid
    face_class: np.ndarray
    face_textured: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        f = np.asarray(self.faces)
        if v.ndim != 2 or v.shape[1] != 3:
            raise ContractError(f"vertices must be (V, 3), got {v.shape}")
        if f.ndim != 2 or f.shape[1] != 3 or not np.issubdtype(f.dtype, np.integer):
            raise ContractError(f"faces must be integer (F, 3), got {f.shape} {f.dtype}")
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise ContractError("face indices out of vertex range")
        uv = np.asarray(self.uv, dtype=np.float64)
        if uv.shape != (len(f), 3, 2):
            raise ContractError(f"uv must be (F, 3, 2), got {uv.shape}")
        fc = np.asarray(self.face_class, dtype=np.uint8)
        ft = np.asarray(self.face_textured, dtype=bool)
        if fc.shape != (len(f),) or ft.shape != (len(f),):
            raise ContractError("face_class/face_textured must be (F,)")
        self.vertices, self.faces, self.uv = v, np.ascontiguousarray(f, dtype=np.int64), uv
        self.face_class, self.face_textured = fc, ft

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def copy(self) -> "TexturedMesh":
        return TexturedMesh(
            self.vertices.copy(),
            self.faces.copy(),
            self.uv.copy(),
            RasterGrid(self.atlas.data.copy(), self.atlas.gsd, self.atlas.anchor),
            self.face_class.copy(),
            self.face_textured.copy(),
        )


def face_normals(vertices: np.ndarray, faces: np.ndarray):
    """Unit normals for all faces at once.

    Returns:
        (normals, degenerate): (F, 3) float64 unit normals and an (F,)
        bool mask of zero-area faces.  Degenerate faces get normal
        (0, 0, 0) instead of raising so bulk callers can report them.
    """
    v = np.asarray(vertices, dtype=np.float64)
    f = np.asarray(faces)
    a = v[f[:, 0]]
    cross = np.cross(v[f[:, 1]] - a, v[f[:, 2]] - a)
    norm = np.linalg.norm(cross, axis=1)
    degenerate = norm < 1e-12
    safe = np.where(degenerate, 1.0, norm)
    return cross / safe[:, None], degenerate


def classify_faces(vertices: np.ndarray, faces: np.ndarray, tau: float = 0.3) -> np.ndarray:
    """Split faces into horizontal and vertical by normal direction.

    A face is FACE_VERTICAL when |n_z| < tau, i.e. its normal lies
    within acos(tau) of the horizon.  Zero-area faces have no normal
    and fall back to horizontal by convention (they cover no texels,
    so treating them as walls would only create empty charts).
    """
    if not 0.0 <= tau <= 1.0:
        raise ContractError(f"tau must lie in [0, 1], got {tau}")
    normals, degenerate = face_normals(vertices, faces)
    vertical = (np.abs(normals[:, 2]) < tau) & ~degenerate
    return np.where(vertical, FACE_VERTICAL, FACE_HORIZONTAL).astype(np.uint8)


def face_normal(mesh: TexturedMesh, face_index: int) -> np.ndarray:
    """Unit normal of one face; CCW winding gives the outward direction.

    Raises:
        GeometryError: zero-area face.
    """
    if not 0 <= face_index < mesh.n_faces:
        raise ContractError(f"face index {face_index} out of range [0, {mesh.n_faces})")
    n, bad = face_normals(mesh.vertices, mesh.faces[face_index : face_index + 1])
    if bad[0]:
        raise GeometryError(f"face {face_index} has zero area")
    return n[0]
