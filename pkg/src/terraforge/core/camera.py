"""Pinhole cameras and rendered view records.

Camera frame follows the usual computer-vision convention: x right,
y down, z forward (into the scene).  A world point P maps to the image
as s * (u, v, 1)^T = K (R P + t), so R rotates world into camera and
t = -R c for a camera centered at world position c.

World frame (shared with the rasters and meshes): z up, x east, y north.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ContractError, GeometryError

__all__ = ["WORLD_UP", "WORLD_EAST", "WORLD_NORTH", "Intrinsics", "CameraView", "look_at"]

WORLD_UP = np.array([0.0, 0.0, 1.0])
WORLD_EAST = np.array([1.0, 0.0, 0.0])
WORLD_NORTH = np.array([0.0, 1.0, 0.0])


@dataclass
class Intrinsics:
    """Pinhole intrinsics plus the target image size in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ContractError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ContractError("image size must be at least 1x1")

    @property
    def K(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    @classmethod
    def from_fov(cls, fov_deg: float, width: int, height: int) -> "Intrinsics":
        """Square-pixel intrinsics from a horizontal field of view."""
        f = (width / 2.0) / np.tan(np.radians(fov_deg) / 2.0)
        return cls(f, f, (width - 1) / 2.0, (height - 1) / 2.0, width, height)


@dataclass
class CameraView:
    """One posed view: pose, optional rendered buffers.

    Attributes:
        intrinsics: pinhole parameters and image size.
        rotation: (3, 3) world-to-camera rotation, det +1.
        translation: (3,) t with camera center c = -R^T t.
        index: position of this view on its trajectory.
        rgb: (H, W, 3) float rendering, or None before rasterization.
        depth: (H, W) camera-space z in meters, +inf where no surface.
        lateral_mask: (H, W) bool, True where the front-most face is
            vertical (facade pixels to be inpainted).
        face_ids: (H, W) int32 front-most face index, -1 where empty.
    """

    intrinsics: Intrinsics
    rotation: np.ndarray
    translation: np.ndarray
    index: int = 0
    rgb: np.ndarray | None = None
    depth: np.ndarray | None = None
    lateral_mask: np.ndarray | None = None
    face_ids: np.ndarray | None = None

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if R.shape != (3, 3):
            raise ContractError(f"rotation must be (3, 3), got {R.shape}")
        if abs(np.linalg.det(R) - 1.0) > 1e-6 or np.max(np.abs(R @ R.T - np.eye(3))) > 1e-6:
            raise ContractError("rotation must be a proper orthonormal matrix")
        self.rotation, self.translation = R, t

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def view_direction(self) -> np.ndarray:
        """Unit forward axis (camera +z) expressed in world coordinates."""
        return self.rotation.T @ np.array([0.0, 0.0, 1.0])

    def project(self, points: np.ndarray):
        """Project (N, 3) world points.

        Returns:
            (uv, z): (N, 2) pixel coordinates and (N,) camera-space depth.
            Points at or behind the camera plane get z <= 0 and their uv
            is computed from the unclamped division, so callers must gate
            on z themselves.
        """
        p = np.asarray(points, dtype=np.float64)
        cam = p @ self.rotation.T + self.translation
        z = cam[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.intrinsics.fx * cam[:, 0] / z + self.intrinsics.cx
            v = self.intrinsics.fy * cam[:, 1] / z + self.intrinsics.cy
        return np.stack([u, v], axis=1), z


def look_at(position, target, intrinsics: Intrinsics, index: int = 0) -> CameraView:
    """Build a view at ``position`` looking toward ``target``.

    The image x axis stays horizontal in the world.  Straight-down (or up)
    viewing directions are rejected because the horizontal-x constraint
    becomes degenerate.
    """
    position = np.asarray(position, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    forward = target - position
    norm = np.linalg.norm(forward)
    if norm < 1e-12:
        raise GeometryError("look_at position and target coincide")
    forward = forward / norm
    horiz = np.linalg.norm(np.cross(forward, WORLD_UP))
    if horiz < 1e-9:
        raise GeometryError("viewing direction parallel to world up")
    x_cam = np.cross(forward, WORLD_UP)
    x_cam /= np.linalg.norm(x_cam)
    y_cam = np.cross(forward, x_cam)  # x cross y = z for this pairing
    y_cam /= np.linalg.norm(y_cam)
    R = np.stack([x_cam, y_cam, forward])
    return CameraView(intrinsics, R, -R @ position, index=index)
