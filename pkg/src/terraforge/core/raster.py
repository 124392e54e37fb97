"""Georeferenced raster grids and bilinear sampling.

A :class:`RasterGrid` couples a (H, W, C) array with its ground sample
distance and the world position of the top-left pixel center.  The world
frame is right-handed with z up, x east, y north; image rows advance
southward, so world y decreases with the row index.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from ..errors import ContractError, SamplingError

__all__ = ["RasterGrid", "bilinear_sample", "save_raster_png", "load_raster_png"]


@dataclass
class RasterGrid:
    """A raster with square pixels anchored in the world frame.

    Attributes:
        data: array of shape (height, width, channels), any float or
            integer dtype.  Single-channel data may be passed as (H, W)
            and is normalized to (H, W, 1).
        gsd: ground sample distance in meters per pixel, > 0.
        anchor: (ax, ay) world coordinates in meters of the center of
            pixel (row 0, col 0).  World x grows with the column index,
            world y shrinks with the row index.
    """

    data: np.ndarray
    gsd: float
    anchor: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ContractError(f"raster data must be (H, W, C), got shape {arr.shape}")
        if not (self.gsd > 0) or not np.isfinite(self.gsd):
            raise ContractError(f"gsd must be a positive finite number, got {self.gsd}")
        ax, ay = self.anchor
        if not (np.isfinite(ax) and np.isfinite(ay)):
            raise ContractError(f"anchor must be finite, got {self.anchor}")
        self.data = arr
        self.anchor = (float(ax), float(ay))
        self.gsd = float(self.gsd)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def world_pixel_origin(self) -> tuple[int, int]:
        """(wx, wy) integer grid index of pixel (0, 0) on the global gsd lattice.

        Requires the anchor to sit on the lattice (multiple of gsd); rasters
        produced by this package always do.
        """
        ax, ay = self.anchor
        wx = round(ax / self.gsd)
        wy = round(ay / self.gsd)
        if abs(wx * self.gsd - ax) > 1e-6 or abs(wy * self.gsd - ay) > 1e-6:
            raise ContractError(
                f"anchor {self.anchor} is not aligned to the gsd={self.gsd} lattice"
            )
        return int(wx), int(wy)

    def read_rows(self, y0: int, y1: int) -> np.ndarray:
        """Rows [y0, y1) as an array view; part of the row-source protocol
        shared with lazily evaluated conditioning sources."""
        if y0 < 0 or y1 > self.height or y1 <= y0:
            raise ContractError(f"row range [{y0}, {y1}) outside raster height {self.height}")
        return self.data[y0:y1]

    def crop(self, col: int, row: int, width: int, height: int) -> "RasterGrid":
        """Axis-aligned crop; the anchor follows the cropped origin."""
        if col < 0 or row < 0 or col + width > self.width or row + height > self.height:
            raise ContractError(
                f"crop [{col}:{col + width}, {row}:{row + height}] exceeds "
                f"raster {self.width}x{self.height}"
            )
        ax, ay = self.anchor
        return RasterGrid(
            self.data[row : row + height, col : col + width],
            gsd=self.gsd,
            anchor=(ax + col * self.gsd, ay - row * self.gsd),
        )


def bilinear_sample(raster: RasterGrid | np.ndarray, x, y) -> np.ndarray:
    """Sample a raster at continuous pixel coordinates.

    Pixel centers sit at integer coordinates; (x, y) must lie inside
    [0, W-1] x [0, H-1].  Values at integer coordinates reproduce the
    stored pixels exactly.

    Args:
        raster: RasterGrid or bare (H, W, C) / (H, W) array.
        x: scalar or array of column coordinates.
        y: scalar or array of row coordinates, same shape as x.

    Returns:
        Array of shape broadcast(x, y).shape + (C,), float64.

    Raises:
        SamplingError: any coordinate outside the valid domain.
    """
    data = raster.data if isinstance(raster, RasterGrid) else np.asarray(raster)
    if data.ndim == 2:
        data = data[:, :, None]
    h, w = data.shape[:2]
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    x, y = np.broadcast_arrays(x, y)
    if x.size and (
        np.min(x) < 0 or np.max(x) > w - 1 or np.min(y) < 0 or np.max(y) > h - 1
    ):
        raise SamplingError(
            f"sample coordinates outside [0, {w - 1}] x [0, {h - 1}]"
        )
    x0 = np.floor(x).astype(np.intp)
    y0 = np.floor(y).astype(np.intp)
    # keep the +1 neighbor in range when sampling exactly on the far edge
    x0 = np.minimum(x0, w - 2) if w > 1 else np.zeros_like(x0)
    y0 = np.minimum(y0, h - 2) if h > 1 else np.zeros_like(y0)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (x - x0)[..., None]
    fy = (y - y0)[..., None]
    d = data.astype(np.float64, copy=False)
    top = d[y0, x0] * (1.0 - fx) + d[y0, x1] * fx
    bot = d[y1, x0] * (1.0 - fx) + d[y1, x1] * fx
    return top * (1.0 - fy) + bot * fy


def _sidecar_path(path: Path) -> Path:
    return path.with_suffix(path.suffix + ".json")


def save_raster_png(
    raster: RasterGrid,
    path: str | Path,
    bits: int = 8,
    value_range: tuple[float, float] = (0.0, 1.0),
    height_scale: float | None = None,
) -> Path:
    """Write a raster as PNG plus a JSON sidecar with geo metadata.

    Values are mapped affinely from ``value_range`` onto the integer range
    and rounded; the sidecar records gsd, anchor, channel count, and an
    optional height scale so the file round-trips without guesswork.
    """
    path = Path(path)
    if bits not in (8, 16):
        raise ContractError(f"bits must be 8 or 16, got {bits}")
    lo, hi = value_range
    if not hi > lo:
        raise ContractError(f"value_range must be increasing, got {value_range}")
    top = (1 << bits) - 1
    norm = np.clip((raster.data.astype(np.float64) - lo) / (hi - lo), 0.0, 1.0)
    q = np.rint(norm * top)
    if bits == 8:
        arr = q.astype(np.uint8)
        if raster.channels == 1:
            img = Image.fromarray(arr[:, :, 0], mode="L")
        elif raster.channels == 3:
            img = Image.fromarray(arr, mode="RGB")
        else:
            raise ContractError(f"8-bit PNG supports 1 or 3 channels, got {raster.channels}")
    else:
        if raster.channels != 1:
            raise ContractError("16-bit PNG output is single channel only")
        img = Image.fromarray(q.astype(np.uint16)[:, :, 0])
    img.save(path, format="PNG", compress_level=1)
    sidecar = {
        "gsd": raster.gsd,
        "anchor_x": raster.anchor[0],
        "anchor_y": raster.anchor[1],
        "channels": raster.channels,
        "height_scale": height_scale,
        "bits": bits,
        "value_range": [lo, hi],
    }
    _sidecar_path(path).write_text(json.dumps(sidecar, sort_keys=True, indent=1) + "\n")
    return path


def load_raster_png(path: str | Path) -> RasterGrid:
    """Read a PNG written by :func:`save_raster_png` back to float data."""
    path = Path(path)
    meta = json.loads(_sidecar_path(path).read_text())
    img = np.asarray(Image.open(path))
    bits = meta.get("bits", 8)
    lo, hi = meta.get("value_range", [0.0, 1.0])
    top = (1 << bits) - 1
    data = img.astype(np.float64) / top * (hi - lo) + lo
    return RasterGrid(data, gsd=meta["gsd"], anchor=(meta["anchor_x"], meta["anchor_y"]))
