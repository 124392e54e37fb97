"""Height inference and heightmap-to-mesh construction.

The first lifting stage turns an orthographic color image into a metric
height map through a prompt-tagged latent backend riding the tiler, so
heights stay seam-free at any extent.  The second stage extrudes the
height grid into a textured triangle mesh: one vertex per pixel, two
triangles per cell, with the color image as the top-surface texture.
Cells with a large height jump yield near-vertical triangles; those
faces classify as walls downstream and get proper textures from the
multi-view inpainting and bake stages.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .core.mesh import FACE_HORIZONTAL, TexturedMesh, classify_faces
from .core.raster import RasterGrid
from .errors import ContractError, QuantizationError, RegistryError
from .sampling.noise_field import NoiseField
from .sampling.schedule import NoiseSchedule
from .tiler import generate_unbounded_latent

logger = logging.getLogger(__name__)

__all__ = [
    "HeightPrompt",
    "HeightMap",
    "infer_height",
    "height_to_mesh",
    "steep_cells",
    "quantize_height",
    "dequantize_height",
    "save_heightmap",
    "load_heightmap",
]

DEFAULT_HEIGHT_PROMPT = "predict the heights of prominent features"


@dataclass(frozen=True)
class HeightPrompt:
    """Instruction text steering a backend toward the height task."""

    text: str = DEFAULT_HEIGHT_PROMPT

    def __post_init__(self):
        if not self.text or not self.text.strip():
            raise ContractError("height prompt must be non-empty")


@dataclass
class HeightMap:
    """Single-channel raster of heights in meters.

    Negative values are clamped to zero on construction (spurious
    below-ground artifacts carry no meaning for surface extrusion), and
    NaNs are rejected.  valid_range is the metric span used for 8-bit
    file quantization.
    """

    raster: RasterGrid
    valid_range: tuple[float, float]

    def __post_init__(self):
        if self.raster.channels != 1:
            raise ContractError(f"height map must have 1 channel, got {self.raster.channels}")
        data = np.asarray(self.raster.data, dtype=np.float64)
        if np.isnan(data).any():
            raise ContractError("height map contains NaN")
        lo, hi = (float(v) for v in self.valid_range)
        if not np.isfinite(lo) or not np.isfinite(hi) or not hi > lo:
            raise QuantizationError(f"valid_range must satisfy max > min, got {self.valid_range}")
        self.raster = RasterGrid(np.maximum(data, 0.0), self.raster.gsd, self.raster.anchor)
        self.valid_range = (lo, hi)

    @property
    def heights(self) -> np.ndarray:
        """(H, W) float64 meters."""
        return self.raster.data[:, :, 0]

    @property
    def gsd(self) -> float:
        return self.raster.gsd

    @property
    def anchor(self) -> tuple[float, float]:
        return self.raster.anchor

    @property
    def width(self) -> int:
        return self.raster.width

    @property
    def height(self) -> int:
        return self.raster.height


def infer_height(x_o: RasterGrid, backend, prompt, noise_field: NoiseField,
                 step_list, schedule: NoiseSchedule, *,
                 height_range: tuple[float, float] = (0.0, 80.0),
                 window_px: int = 128, merge: str = "centerCrop",
                 threads: int = 1) -> HeightMap:
    """Generate the height map conditioned on an orthographic image.

    The backend works in its codec's latent space through the tiler, so
    any extent stays continuous across window seams.  Its normalized
    output is mapped linearly onto height_range meters.

    Args:
        x_o: RGB orthographic image, values in [0, 1].
        backend: latent denoiser carrying ``task == "height"`` (or
            "any") and a ``codec`` attribute.
        prompt: HeightPrompt, bare string, or None for the default.

    Raises:
        RegistryError: backend does not serve the height task or has no
            codec.
    """
    task = getattr(backend, "task", "image")
    if task not in ("height", "any"):
        raise RegistryError(f"backend task {task!r} cannot serve height inference")
    codec = getattr(backend, "codec", None)
    if codec is None:
        raise RegistryError("height inference needs a backend with a codec attribute")
    if prompt is None:
        prompt = HeightPrompt()
    elif isinstance(prompt, str):
        prompt = HeightPrompt(prompt)
    lo, hi = (float(v) for v in height_range)
    if not hi > lo:
        raise ContractError(f"height_range must satisfy max > min, got {height_range}")
    out = generate_unbounded_latent(
        x_o, codec, backend, noise_field, step_list, schedule,
        window_px=window_px, merge=merge, prompt=prompt.text, threads=threads,
    )
    # decoded channels replicate the height plane; keep the first
    h01 = np.clip(out.data[:, :, 0:1], 0.0, 1.0)
    meters = h01 * (hi - lo) + lo
    grid = RasterGrid(meters, gsd=x_o.gsd, anchor=x_o.anchor)
    return HeightMap(grid, valid_range=(max(lo, 0.0), hi))


def height_to_mesh(h: HeightMap, ortho: RasterGrid, tau: float = 0.3) -> TexturedMesh:
    """Extrude a height grid into a triangle mesh textured by ``ortho``.

    One vertex per pixel at (anchor + pixel * gsd, height); every cell
    contributes two triangles, so the mesh has exactly
    2 (W - 1)(H - 1) faces and spans (W - 1) x (H - 1) gsd meters.
    Cell (r, c) with corners A=(r,c), B=(r,c+1), C=(r+1,c+1), D=(r+1,c)
    yields triangles (A, C, B) and (A, D, C), both counter-clockwise
    from above for flat ground.  Top UVs address the ortho image at
    pixel centers; faces classifying as vertical (|n_z| < tau) start
    untextured, to be painted by the lateral pipeline.

    Raises:
        ContractError: extent/gsd/anchor mismatch, or a grid smaller
            than 2 x 2.
    """
    if (h.width, h.height) != (ortho.width, ortho.height):
        raise ContractError(
            f"height {h.width}x{h.height} and ortho {ortho.width}x{ortho.height} differ"
        )
    if h.gsd != ortho.gsd or h.anchor != ortho.anchor:
        raise ContractError("height map and ortho must share gsd and anchor")
    rows, cols = h.height, h.width
    if rows < 2 or cols < 2:
        raise ContractError(f"need at least a 2x2 grid, got {cols}x{rows}")
    g = h.gsd
    ax, ay = h.anchor
    xs = ax + np.arange(cols) * g
    ys = ay - np.arange(rows) * g
    xx, yy = np.meshgrid(xs, ys)
    vertices = np.column_stack([xx.ravel(), yy.ravel(), h.heights.ravel()])

    rr, cc = np.meshgrid(np.arange(rows - 1), np.arange(cols - 1), indexing="ij")
    a = (rr * cols + cc).ravel()
    b = a + 1
    c = a + cols + 1
    d = a + cols
    tris = np.empty((a.size, 2, 3), dtype=np.int64)
    tris[:, 0, 0], tris[:, 0, 1], tris[:, 0, 2] = a, c, b
    tris[:, 1, 0], tris[:, 1, 1], tris[:, 1, 2] = a, d, c
    faces = tris.reshape(-1, 3)

    uv_vertex = np.column_stack([
        (np.tile(np.arange(cols), rows) + 0.5) / cols,
        (np.repeat(np.arange(rows), cols) + 0.5) / rows,
    ])
    uv = uv_vertex[faces]

    face_class = classify_faces(vertices, faces, tau)
    face_textured = face_class == FACE_HORIZONTAL
    return TexturedMesh(vertices, faces, uv, ortho, face_class, face_textured)


def steep_cells(h: HeightMap, threshold: float = 3.0) -> np.ndarray:
    """(H-1, W-1) mask of cells whose corner relief exceeds ``threshold``.

    A cell with relief d spans a slope of atan(d / gsd), so cells over
    the threshold are the ones whose triangles turn into near-vertical
    facade quads.  Purely diagnostic; meshing never inserts or removes
    geometry based on it.
    """
    z = h.heights
    corners = np.stack([z[:-1, :-1], z[:-1, 1:], z[1:, 1:], z[1:, :-1]])
    return (corners.max(axis=0) - corners.min(axis=0)) > threshold


def _coerce_heights(h, valid_range):
    if isinstance(h, HeightMap):
        arr = h.heights
        rng = valid_range if valid_range is not None else h.valid_range
    else:
        arr = np.asarray(h, dtype=np.float64)
        if arr.ndim == 3 and arr.shape[2] == 1:
            arr = arr[:, :, 0]
        if valid_range is None:
            raise QuantizationError("valid_range is required for bare arrays")
        rng = valid_range
    lo, hi = (float(v) for v in rng)
    if not hi > lo:
        raise QuantizationError(f"valid_range must satisfy max > min, got {rng}")
    return arr, lo, hi


def quantize_height(h, valid_range: tuple[float, float] | None = None) -> np.ndarray:
    """Map heights onto uint8 with round-half-up.

    Values are clipped into valid_range first (in particular anything
    negative with a zero-based range lands on 0), then scaled so that
    min -> 0 and max -> 255.
    """
    arr, lo, hi = _coerce_heights(h, valid_range)
    x = np.clip((arr - lo) / (hi - lo), 0.0, 1.0)
    return np.floor(x * 255.0 + 0.5).astype(np.uint8)


def dequantize_height(q: np.ndarray, valid_range: tuple[float, float]) -> np.ndarray:
    """Inverse of :func:`quantize_height` up to half a quantization step."""
    lo, hi = (float(v) for v in valid_range)
    if not hi > lo:
        raise QuantizationError(f"valid_range must satisfy max > min, got {valid_range}")
    q = np.asarray(q)
    return q.astype(np.float64) / 255.0 * (hi - lo) + lo


def _sidecar(path: Path) -> Path:
    return path.with_suffix(path.suffix + ".json")


def save_heightmap(h: HeightMap, path: str | Path) -> Path:
    """Write an 8-bit PNG plus a JSON sidecar {min_m, max_m, gsd, ...}."""
    path = Path(path)
    q = quantize_height(h)
    Image.fromarray(q, mode="L").save(path, format="PNG", compress_level=1)
    lo, hi = h.valid_range
    ax, ay = h.anchor
    meta = {"min_m": lo, "max_m": hi, "gsd": h.gsd, "anchor_x": ax, "anchor_y": ay}
    _sidecar(path).write_text(json.dumps(meta, sort_keys=True))
    return path


def load_heightmap(path: str | Path) -> HeightMap:
    path = Path(path)
    meta = json.loads(_sidecar(path).read_text())
    with Image.open(path) as img:
        q = np.asarray(img.convert("L"), dtype=np.uint8)
    rng = (meta["min_m"], meta["max_m"])
    meters = dequantize_height(q, rng)[:, :, None]
    grid = RasterGrid(meters, gsd=float(meta["gsd"]),
                      anchor=(meta.get("anchor_x", 0.0), meta.get("anchor_y", 0.0)))
    return HeightMap(grid, valid_range=rng)
