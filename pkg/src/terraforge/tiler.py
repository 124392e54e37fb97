"""Unbounded tiled generation with world-anchored shared noise.

Extents larger than one generator window are covered by sliding windows
with 50% overlap.  Every window starts from noise addressed by *world*
pixel coordinates, so the overlapping region of two adjacent windows
begins from identical noise; with a receptive-field-bounded backend the
overlap content then agrees bit-for-bit outside a border margin of the
backend radius, and any merge rule stitches without visible seams.

Windows are processed row by row so arbitrarily tall extents stream
through fixed-size buffers; finished output rows can be handed to a sink
instead of being assembled in memory.
"""

from __future__ import annotations

import logging
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from ._arrays import stack_windows
from .core.raster import RasterGrid
from .errors import ContractError, PlanError
from .sampling.noise_field import NoiseField, level_key
from .sampling.sampler import Conditioning, sample
from .sampling.schedule import NoiseSchedule

logger = logging.getLogger(__name__)

__all__ = ["WindowPlan", "plan_windows", "generate_unbounded", "generate_unbounded_latent"]

MERGE_MODES = ("centerCrop", "feather")

# noise-plane domain tags; latent planes use the world domain keyed by
# their own gsd so an f=1 codec reproduces the pixel path exactly
_DOMAIN_WORLD = 0
_DOMAIN_WINDOW_LOCAL = 3


@dataclass(frozen=True)
class WindowPlan:
    """Window origins covering an extent at 50% overlap.

    Attributes:
        width / height: extent in pixels.
        window: square window edge in pixels (even).
        origins_x / origins_y: strictly increasing start offsets; the
            stride is window/2 except for the final origin, which is
            clamped so the last window ends exactly on the extent edge.
    """

    width: int
    height: int
    window: int
    origins_x: tuple[int, ...]
    origins_y: tuple[int, ...]

    @property
    def stride(self) -> int:
        return self.window // 2

    @property
    def n_windows(self) -> int:
        return len(self.origins_x) * len(self.origins_y)

    def ownership_bounds(self, axis: str) -> tuple[int, ...]:
        """Half-open pixel ownership edges for centerCrop merging.

        Pixel p (center p + 0.5) belongs to the window whose center is
        nearest, ties to the lower window index.  Returns
        len(origins) + 1 edges starting at 0 and ending at the extent.
        """
        origins = self.origins_x if axis == "x" else self.origins_y
        extent = self.width if axis == "x" else self.height
        centers = [o + self.window / 2.0 for o in origins]
        bounds = [0]
        for a, b in zip(centers, centers[1:]):
            # first pixel strictly closer to the next center
            bounds.append(int(np.floor((a + b) / 2.0 + 0.5)))
        bounds.append(extent)
        return tuple(bounds)

    def seam_columns(self) -> tuple[int, ...]:
        """Interior ownership boundaries along x (seam between col c-1 and c)."""
        return self.ownership_bounds("x")[1:-1]

    def seam_rows(self) -> tuple[int, ...]:
        return self.ownership_bounds("y")[1:-1]


def plan_windows(extent_px: tuple[int, int], window_px: int = 64) -> WindowPlan:
    """Plan sliding windows at 50% overlap over an extent.

    Args:
        extent_px: (width, height) in pixels, each >= window_px.
        window_px: even window edge >= 2.

    Raises:
        PlanError: degenerate extent, odd window, or extent < window.
    """
    w, h = (int(v) for v in extent_px)
    window = int(window_px)
    if window < 2 or window % 2 != 0:
        raise PlanError(f"window must be even and >= 2, got {window}")
    if w < 1 or h < 1:
        raise PlanError(f"extent must be positive, got {extent_px}")
    if w < window or h < window:
        raise PlanError(f"extent {extent_px} smaller than window {window}")

    def axis_origins(extent: int) -> tuple[int, ...]:
        stride = window // 2
        origins = list(range(0, extent - window + 1, stride))
        if origins[-1] != extent - window:
            origins.append(extent - window)  # clamp the final window
        return tuple(origins)

    return WindowPlan(w, h, window, axis_origins(w), axis_origins(h))


class _EdgePaddedSource:
    """Row source extending another source rightward/downward by edge
    replication, so extents smaller than one window still tile."""

    def __init__(self, inner, width: int, height: int):
        self.inner = inner
        self.width = int(width)
        self.height = int(height)
        self.channels = inner.channels
        self.gsd = inner.gsd
        self.anchor = inner.anchor

    def world_pixel_origin(self):
        return self.inner.world_pixel_origin()

    def read_rows(self, y0: int, y1: int) -> np.ndarray:
        if y0 < 0 or y1 > self.height or y1 <= y0:
            raise ContractError(f"row range [{y0}, {y1}) outside padded height {self.height}")
        lo = min(y0, self.inner.height - 1)
        hi = max(min(y1, self.inner.height), lo + 1)
        rows = self.inner.read_rows(lo, hi)
        offset = y0 - lo
        pad_bottom = (y1 - lo) - len(rows)
        pad_right = self.width - self.inner.width
        if pad_bottom > 0 or pad_right > 0:
            rows = np.pad(rows, ((0, max(pad_bottom, 0)), (0, pad_right), (0, 0)), mode="edge")
        return rows[offset : offset + (y1 - y0)]


def _resolve_dtype(source) -> np.dtype:
    probed = np.asarray(source.read_rows(0, 1)).dtype
    return np.dtype(probed) if probed in (np.float32, np.float64) else np.dtype(np.float64)


def _window_noise(noise_field: NoiseField, mode: str, level: int, t_top: int,
                  world_x0: int, noise_row0: int, origins_x, window: int,
                  channels: int, dtype, row_index: int) -> np.ndarray:
    """Starting noise for one row of windows, stacked (B, win, win, C).

    noise_row0 is the noise-lattice row of the band's top raster row:
    raster row r maps to lattice row r - worldOriginY, because world y
    decreases as rows increase.  Any raster covering a world pixel draws
    the same value for it.
    """
    if mode == "world":
        span = origins_x[-1] + window - origins_x[0]
        band = noise_field.draw_grid(level, t_top, world_x0 + origins_x[0], noise_row0,
                                     window, span, channels, dtype=dtype)
        rel = np.asarray(origins_x) - origins_x[0]
        return stack_windows(band, rel, window)
    if mode == "window":
        # ablation path: every window draws its own unrelated noise block
        blocks = []
        for ix in range(len(origins_x)):
            linear = row_index * len(origins_x) + ix
            blocks.append(noise_field.draw_grid(
                level ^ level_key(1.0, domain=_DOMAIN_WINDOW_LOCAL),
                t_top, linear * window, 0, window, window, channels, dtype=dtype))
        return np.ascontiguousarray(np.stack(blocks, axis=0))
    raise ContractError(f"unknown noise mode {mode!r}")


def _ordered_results(fn, n_rows: int, threads: int):
    """Yield fn(0..n_rows-1) in order; a thread pool may run ahead, but
    only by a bounded number of rows so memory stays flat."""
    if threads <= 1:
        for i in range(n_rows):
            yield fn(i)
        return
    with ThreadPoolExecutor(max_workers=threads) as pool:
        pending: deque = deque()
        nxt = 0
        while nxt < n_rows and len(pending) < threads + 2:
            pending.append(pool.submit(fn, nxt))
            nxt += 1
        while pending:
            batch = pending.popleft().result()
            if nxt < n_rows:
                pending.append(pool.submit(fn, nxt))
                nxt += 1
            yield batch


class _Merger:
    """Consumes per-row window batches and produces the merged output.

    centerCrop copies each window's owned pixels (nearest-center rule)
    and can stream finished rows to a sink; feather blends all windows
    with a linear overlap ramp and keeps the full extent in memory.
    """

    def __init__(self, plan: WindowPlan, out_w: int, out_h: int, channels: int,
                 dtype, merge: str, sink=None):
        self.plan = plan
        self.out_w, self.out_h, self.channels = out_w, out_h, channels
        self.dtype = dtype
        self.merge = merge
        self.sink = sink
        self.bounds_x = plan.ownership_bounds("x")
        self.bounds_y = plan.ownership_bounds("y")
        if merge == "feather":
            self.acc = np.zeros((plan.height, plan.width, channels), dtype=np.float64)
            self.wsum = np.zeros((plan.height, plan.width, 1), dtype=np.float64)
            ramp = plan.window // 2
            prof = np.minimum(np.arange(plan.window) + 1, np.arange(plan.window)[::-1] + 1)
            prof = np.minimum(prof, ramp) / float(ramp)
            self.w2d = (prof[:, None] * prof[None, :])[:, :, None]
        elif sink is None:
            self.out = np.empty((out_h, out_w, channels), dtype=dtype)

    def add_row(self, iy: int, batch: np.ndarray):
        plan = self.plan
        oy = plan.origins_y[iy]
        if self.merge == "feather":
            for ix, ox in enumerate(plan.origins_x):
                self.acc[oy : oy + plan.window, ox : ox + plan.window] += self.w2d * batch[ix]
                self.wsum[oy : oy + plan.window, ox : ox + plan.window] += self.w2d
            return
        y_lo = self.bounds_y[iy]
        y_hi = min(self.bounds_y[iy + 1], self.out_h)
        if y_hi <= y_lo:
            return
        rows = np.empty((y_hi - y_lo, self.out_w, self.channels), dtype=self.dtype)
        for ix, ox in enumerate(plan.origins_x):
            x_lo = self.bounds_x[ix]
            x_hi = min(self.bounds_x[ix + 1], self.out_w)
            if x_hi <= x_lo:
                continue
            rows[:, x_lo:x_hi] = batch[ix, y_lo - oy : y_hi - oy, x_lo - ox : x_hi - ox]
        if self.sink is not None:
            self.sink(y_lo, rows)
        else:
            self.out[y_lo:y_hi] = rows

    def finish(self, gsd: float, anchor) -> RasterGrid | None:
        if self.merge == "feather":
            data = (self.acc / self.wsum).astype(self.dtype)[: self.out_h, : self.out_w]
            return RasterGrid(data, gsd, anchor)
        if self.sink is not None:
            return None
        return RasterGrid(self.out, gsd, anchor)


def _tile_setup(cond, window_px: int, merge: str, sink):
    if merge not in MERGE_MODES:
        raise ContractError(f"merge must be one of {MERGE_MODES}, got {merge!r}")
    if merge == "feather" and sink is not None:
        raise ContractError("feather merging requires in-memory assembly")
    out_w, out_h = cond.width, cond.height
    source = cond
    if out_w < window_px or out_h < window_px:
        source = _EdgePaddedSource(cond, max(out_w, window_px), max(out_h, window_px))
    plan = plan_windows((source.width, source.height), window_px)
    return source, plan, out_w, out_h


def generate_unbounded(cond, backend, noise_field: NoiseField, step_list,
                       schedule: NoiseSchedule, window_px: int = 64,
                       merge: str = "centerCrop", noise_mode: str = "world",
                       prompt: str | None = None,
                       res_embedding: np.ndarray | None = None,
                       sink=None, threads: int = 1):
    """Generate an extent of arbitrary size with seam-free stitching.

    Args:
        cond: conditioning raster (RasterGrid) or lazy row source with
            the same attributes; defines extent, gsd, and anchor.
        backend: denoiser backend; each window receives "cond" and
            "init_noise" images.
        noise_field: world-anchored noise supply.
        step_list: timesteps handed to :func:`sample` per window.
        schedule: noise schedule.
        window_px: generator window edge (even).
        merge: "centerCrop" (nearest window center owns each pixel) or
            "feather" (linear ramp blend over overlaps, in-memory only).
        noise_mode: "world" for shared world-anchored starting noise,
            "window" for the independent-noise ablation.
        sink: optional callable(y0, rows) receiving finalized output rows
            in increasing order; when given no full array is assembled
            and the function returns None.
        threads: worker threads for window rows.  Any value produces
            identical bits: windows are pure functions of world
            coordinates and rows are merged in plan order.

    Returns:
        RasterGrid matching the conditioning extent, or None with a sink.
    """
    source, plan, out_w, out_h = _tile_setup(cond, window_px, merge, sink)
    wx0, wy0 = source.world_pixel_origin()
    level = level_key(source.gsd, domain=_DOMAIN_WORLD)
    steps = [int(t) for t in step_list]
    dtype = _resolve_dtype(source)
    channels = source.channels
    window = plan.window
    logger.debug("tiling %dx%d px into %d windows of %d", plan.width, plan.height,
                 plan.n_windows, window)

    def run_row(iy: int) -> np.ndarray:
        oy = plan.origins_y[iy]
        band = np.asarray(source.read_rows(oy, oy + window), dtype=dtype)
        win_cond = stack_windows(band, plan.origins_x, window)
        win_noise = _window_noise(noise_field, noise_mode, level, steps[0],
                                  wx0, oy - wy0, plan.origins_x, window,
                                  channels, dtype, iy)
        cnd = Conditioning(images={"cond": win_cond, "init_noise": win_noise},
                           res_embedding=res_embedding, prompt=prompt)
        return sample(backend, (window, window, channels), cnd, win_noise, steps, schedule)

    merger = _Merger(plan, out_w, out_h, channels, dtype, merge, sink)
    for iy, batch in enumerate(_ordered_results(run_row, len(plan.origins_y), threads)):
        merger.add_row(iy, batch)
    return merger.finish(source.gsd, source.anchor)


def generate_unbounded_latent(cond, codec, backend, noise_field: NoiseField,
                              step_list, schedule: NoiseSchedule,
                              window_px: int = 64, merge: str = "centerCrop",
                              noise_mode: str = "world",
                              prompt: str | None = None,
                              res_embedding: np.ndarray | None = None,
                              sink=None, threads: int = 1):
    """Tiled generation in the latent space of a block codec.

    Windows are cropped in pixel space, encoded, sampled with shared
    latent noise addressed at worldPixel / f, decoded, and merged in
    pixel space.  With the f=1 identity codec this reproduces
    :func:`generate_unbounded` bit-for-bit.

    The backend is offered the pixel window ("cond"), its encoding
    ("cond_latent"), and the starting latent noise ("init_noise_latent";
    also aliased to "init_noise" when f == 1).

    Raises:
        ContractError: window not divisible by 2f, channel mismatch, or
            a window origin in world pixels off the codec block lattice
            (pad the extent to a multiple of the block factor).
    """
    f = codec.factor
    if window_px % (2 * f):
        raise ContractError(f"window {window_px} must be divisible by 2*f={2 * f}")
    if cond.channels != codec.image_channels:
        raise ContractError(f"codec expects {codec.image_channels} channels, got {cond.channels}")
    source, plan, out_w, out_h = _tile_setup(cond, window_px, merge, sink)
    wx0, wy0 = source.world_pixel_origin()
    misaligned = sorted({o for o in (wx0, wy0, *plan.origins_x, *plan.origins_y) if o % f})
    if misaligned:
        raise ContractError(
            f"window origins {misaligned} off the block lattice (factor {f}); "
            "pad the extent to a multiple of the block factor"
        )
    level = level_key(source.gsd * f, domain=_DOMAIN_WORLD)
    steps = [int(t) for t in step_list]
    dtype = _resolve_dtype(source)
    channels = source.channels
    window = plan.window
    wl = window // f
    lat_origins_x = [o // f for o in plan.origins_x]

    def run_row(iy: int) -> np.ndarray:
        oy = plan.origins_y[iy]
        band = np.asarray(source.read_rows(oy, oy + window), dtype=dtype)
        win_cond = stack_windows(band, plan.origins_x, window)
        z_cond = codec_encode_array(codec, win_cond)
        noise = _window_noise(noise_field, noise_mode, level, steps[0],
                              wx0 // f, (oy - wy0) // f, lat_origins_x, wl,
                              codec.latent_channels, dtype, iy)
        images = {"cond": win_cond, "cond_latent": z_cond, "init_noise_latent": noise}
        if f == 1:
            images["init_noise"] = noise
        cnd = Conditioning(images=images, res_embedding=res_embedding, prompt=prompt)
        z = sample(backend, (wl, wl, codec.latent_channels), cnd, noise, steps, schedule)
        return codec_decode_array(codec, z).astype(dtype, copy=False)

    merger = _Merger(plan, out_w, out_h, channels, dtype, merge, sink)
    for iy, batch in enumerate(_ordered_results(run_row, len(plan.origins_y), threads)):
        merger.add_row(iy, batch)
    return merger.finish(source.gsd, source.anchor)


def codec_encode_array(codec, arr: np.ndarray) -> np.ndarray:
    """Apply a codec's block transform to a (..., H, W, C) array.

    Mirrors ``codec.encode`` on each leading-axis slice bit-for-bit (the
    matmul reduces over the same axis in the same order).
    """
    if codec.factor == 1:
        return arr
    f = codec.factor
    *lead, h, w, c = arr.shape
    blocks = arr.reshape(*lead, h // f, f, w // f, f, c)
    blocks = np.moveaxis(blocks, -4, -3)  # (..., hb, wb, dy, dx, c)
    flat = np.ascontiguousarray(blocks).reshape(*lead, h // f, w // f, c * f * f)
    return flat @ codec._mat.T


def codec_decode_array(codec, arr: np.ndarray) -> np.ndarray:
    """Inverse of :func:`codec_encode_array` for (..., h, w, latent C)."""
    if codec.factor == 1:
        return arr
    f = codec.factor
    *lead, h, w, _ = arr.shape
    c = codec.image_channels
    flat = arr @ codec._mat
    blocks = flat.reshape(*lead, h, w, f, f, c)
    blocks = np.moveaxis(blocks, -3, -4)  # (..., h, dy, w, dx, c)
    return np.ascontiguousarray(blocks).reshape(*lead, h * f, w * f, c)
