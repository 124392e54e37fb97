"""Coarse-to-fine refinement of an orthographic image through a
resolution ladder.

One shared backend serves every rung: each refinement conditions only on
the previous level, bilinearly upsampled to the target ground sample
distance and tagged with that scale's resolution embedding.  Levels can
be arbitrarily large; the conditioning is a lazy row source, so a rung
streams through the tiler without materializing the upsampled image.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np

from .core.encoding import resolution_embedding
from .core.raster import RasterGrid, bilinear_sample
from .errors import ContractError, LadderError, RegistryError
from .sampling.noise_field import NoiseField
from .sampling.schedule import NoiseSchedule
from .tiler import generate_unbounded

logger = logging.getLogger(__name__)

__all__ = [
    "ScaleLadder",
    "ConditionSet",
    "UpsampleSource",
    "assemble_condition",
    "refine_once",
    "run_cascade",
    "downsample_box",
    "make_anchor",
    "known_anchors",
]


@dataclass(frozen=True)
class ScaleLadder:
    """Ordered ground-sample-distance levels, coarsest first.

    Attributes:
        levels: gsd values in m/pixel, strictly coarse to fine; each
            adjacent pair must satisfy levels[i] == levels[i+1] * factor
            exactly (dyadic ladders such as 64/16/4/1 do).
        factor: per-level pixel multiplier N.
        patch: nominal anchor edge in pixels, used for extent planning.
    """

    levels: tuple[float, ...]
    factor: int = 4
    patch: int = 256

    def __post_init__(self):
        levels = tuple(float(v) for v in self.levels)
        object.__setattr__(self, "levels", levels)
        if len(levels) < 1:
            raise LadderError("ladder needs at least one level")
        if any(not (v > 0) or not np.isfinite(v) for v in levels):
            raise LadderError(f"levels must be positive finite, got {levels}")
        if int(self.factor) != self.factor or self.factor < 2:
            raise LadderError(f"factor must be an integer >= 2, got {self.factor}")
        object.__setattr__(self, "factor", int(self.factor))
        if int(self.patch) != self.patch or self.patch < 2:
            raise LadderError(f"patch must be an integer >= 2, got {self.patch}")
        object.__setattr__(self, "patch", int(self.patch))
        for coarse, fine in zip(levels, levels[1:]):
            if coarse != fine * self.factor:
                raise LadderError(
                    f"adjacent levels {coarse} -> {fine} are not an exact "
                    f"factor-{self.factor} refinement"
                )

    @classmethod
    def default(cls) -> "ScaleLadder":
        return cls(levels=(64.0, 16.0, 4.0, 1.0))

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    @property
    def coarsest(self) -> float:
        return self.levels[0]

    @property
    def finest(self) -> float:
        return self.levels[-1]

    def level_extent(self, index: int) -> int:
        """Logical pixel edge of level ``index`` for a patch-sized anchor."""
        if not 0 <= index < self.n_levels:
            raise LadderError(f"level index {index} outside ladder of {self.n_levels}")
        return self.patch * self.factor ** index

    def to_json(self) -> str:
        return json.dumps(
            {"levels": list(self.levels), "factor": self.factor, "patch": self.patch}
        )

    @classmethod
    def from_json(cls, text: str) -> "ScaleLadder":
        raw = json.loads(text)
        return cls(
            levels=tuple(raw["levels"]),
            factor=raw.get("factor", 4),
            patch=raw.get("patch", 256),
        )


def _check_ratio(low_gsd: float, target_gsd: float, factor: int):
    if not (target_gsd > 0):
        raise LadderError(f"target gsd must be positive, got {target_gsd}")
    if low_gsd != target_gsd * factor:
        raise LadderError(
            f"conditioning gsd {low_gsd} is not exactly {factor}x the "
            f"target {target_gsd}"
        )


@dataclass
class ConditionSet:
    """Everything one refinement step conditions on.

    Attributes:
        low_res: previous-level raster (or lazy row source).
        target_gsd: gsd of the level being generated.
        factor: pixel multiplier tying the two (low_res.gsd = factor *
            target_gsd, checked exactly).
        res_embedding: resolution embedding of target_gsd; derived when
            not supplied.
        prompt: optional free-text steering.
    """

    low_res: object
    target_gsd: float
    factor: int = 4
    res_embedding: np.ndarray | None = None
    prompt: str | None = None

    def __post_init__(self):
        self.target_gsd = float(self.target_gsd)
        _check_ratio(self.low_res.gsd, self.target_gsd, self.factor)
        if self.res_embedding is None:
            self.res_embedding = resolution_embedding(self.target_gsd)


class UpsampleSource:
    """Lazy bilinear xN upsample of a raster (or row source).

    The anchor carries over unchanged: output pixel (0, 0) is centered
    on input pixel (0, 0), so output pixel X samples the input at X / N.
    Coordinates past the final input pixel center clamp to it, which
    replicates the last row/column over the trailing (N - 1) outputs.
    Band reads reproduce the full-array evaluation bit for bit.
    """

    def __init__(self, inner, factor: int, target_gsd: float | None = None,
                 dtype=np.float64):
        if inner.width < 2 or inner.height < 2:
            raise ContractError("upsampling needs at least a 2x2 source")
        self.inner = inner
        self.factor = int(factor)
        self.width = inner.width * self.factor
        self.height = inner.height * self.factor
        self.channels = inner.channels
        self.gsd = float(target_gsd) if target_gsd is not None else inner.gsd / self.factor
        self.anchor = inner.anchor
        self.dtype = np.dtype(dtype)
        self._x = np.minimum(np.arange(self.width) / self.factor, inner.width - 1)

    def world_pixel_origin(self):
        wx, wy = self.inner.world_pixel_origin()
        return wx * self.factor, wy * self.factor

    def read_rows(self, y0: int, y1: int) -> np.ndarray:
        if y0 < 0 or y1 > self.height or y1 <= y0:
            raise ContractError(f"row range [{y0}, {y1}) outside height {self.height}")
        y = np.minimum(np.arange(y0, y1) / self.factor, self.inner.height - 1)
        i0 = int(np.floor(y[0]))
        i1 = min(int(np.floor(y[-1])) + 2, self.inner.height)
        i0 = min(i0, i1 - 2)
        band = self.inner.read_rows(i0, i1)
        out = bilinear_sample(band, self._x[None, :], (y - i0)[:, None])
        return out.astype(self.dtype, copy=False)

    def materialize(self) -> RasterGrid:
        """Evaluate the whole upsample eagerly (small extents only)."""
        return RasterGrid(self.read_rows(0, self.height), gsd=self.gsd, anchor=self.anchor)


def assemble_condition(low_res, target_gsd: float, factor: int = 4,
                       *, lazy: bool = False, dtype=np.float64):
    """Build the conditioning stack for one refinement step.

    Returns:
        (cond, embedding): the low-res raster upsampled xN to the target
        gsd with the anchor preserved (a lazy row source when
        lazy=True), and the resolution embedding of target_gsd.

    Raises:
        LadderError: low_res.gsd is not exactly factor * target_gsd.
    """
    _check_ratio(low_res.gsd, target_gsd, factor)
    src = UpsampleSource(low_res, factor, target_gsd=target_gsd, dtype=dtype)
    emb = resolution_embedding(target_gsd)
    if lazy:
        return src, emb
    return src.materialize(), emb


def refine_once(x_i, target_gsd: float, backend, noise_field: NoiseField,
                step_list, schedule: NoiseSchedule, *, factor: int = 4,
                prompt: str | None = None, window_px: int = 64,
                merge: str = "centerCrop", noise_mode: str = "world",
                dtype=np.float64, sink=None, threads: int = 1):
    """One ladder rung: generate the xN finer level from level x_i.

    The conditioning is streamed (never materialized), so x_i may be
    arbitrarily large.  Returns the refined RasterGrid, or None when a
    sink consumes the rows.
    """
    cond, emb = assemble_condition(x_i, target_gsd, factor, lazy=True, dtype=dtype)
    return generate_unbounded(
        cond, backend, noise_field, step_list, schedule,
        window_px=window_px, merge=merge, noise_mode=noise_mode,
        prompt=prompt, res_embedding=emb, sink=sink, threads=threads,
    )


def run_cascade(anchor, ladder: ScaleLadder, backend, noise_field: NoiseField,
                step_list, schedule: NoiseSchedule, *, prompt: str | None = None,
                window_px: int = 64, merge: str = "centerCrop",
                noise_mode: str = "world", dtype=np.float64,
                store_factory=None, threads: int = 1) -> list:
    """Refine an anchor image through every ladder level in order.

    Each level is generated solely from the previous one; the chain is
    Markov by construction because nothing older is ever handed to the
    backend.  One backend instance serves all rungs.

    Args:
        anchor: coarsest-level raster; its gsd must equal the ladder's
            first level exactly.
        store_factory: optional callable(level_index, width, height,
            gsd, anchor, channels) returning an object with
            ``write_rows(y0, rows)`` and ``open() -> row source``; when
            given, each refined level streams through its store and the
            reopened source becomes both the returned level and the next
            conditioning.  Lets callers spill levels to disk (and, if
            they quantize on write, makes the files the ground truth).

    Returns:
        One entry per ladder level, the anchor first.

    Raises:
        LadderError: anchor gsd does not match the coarsest level.
    """
    if anchor.gsd != ladder.coarsest:
        raise LadderError(
            f"anchor gsd {anchor.gsd} does not match the ladder's coarsest "
            f"level {ladder.coarsest}"
        )
    levels = [anchor]
    current = anchor
    for index, target in enumerate(ladder.levels[1:], start=1):
        logger.info("cascade level %d: gsd %s -> %s", index, current.gsd, target)
        if store_factory is None:
            current = refine_once(
                current, target, backend, noise_field, step_list, schedule,
                factor=ladder.factor, prompt=prompt, window_px=window_px,
                merge=merge, noise_mode=noise_mode, dtype=dtype, threads=threads,
            )
        else:
            store = store_factory(
                index, current.width * ladder.factor, current.height * ladder.factor,
                target, current.anchor, current.channels,
            )
            refine_once(
                current, target, backend, noise_field, step_list, schedule,
                factor=ladder.factor, prompt=prompt, window_px=window_px,
                merge=merge, noise_mode=noise_mode, dtype=dtype,
                sink=store.write_rows, threads=threads,
            )
            current = store.open()
        levels.append(current)
    return levels


def downsample_box(raster: RasterGrid, factor: int) -> RasterGrid:
    """Mean over non-overlapping factor x factor blocks.

    The anchor carries over unchanged, mirroring the upsample
    convention, so a downsample of an upsample reports the same world
    placement.
    """
    f = int(factor)
    if f < 1:
        raise ContractError(f"factor must be >= 1, got {factor}")
    if raster.height % f or raster.width % f:
        raise ContractError(
            f"extent {raster.width}x{raster.height} not divisible by {f}"
        )
    d = raster.data.astype(np.float64, copy=False)
    h, w, c = d.shape
    coarse = d.reshape(h // f, f, w // f, f, c).mean(axis=(1, 3))
    return RasterGrid(coarse, gsd=raster.gsd * f, anchor=raster.anchor)


def _hills_anchor(rng: np.random.Generator, patch: int) -> np.ndarray:
    yy, xx = np.meshgrid(np.arange(patch), np.arange(patch), indexing="ij")
    relief = np.zeros((patch, patch))
    for _ in range(6):
        fx, fy = rng.uniform(0.004, 0.02, size=2)
        px, py = rng.uniform(0, 2 * np.pi, size=2)
        relief += rng.uniform(0.5, 1.0) * np.sin(2 * np.pi * fx * xx + px) * np.sin(
            2 * np.pi * fy * yy + py
        )
    lo, hi = relief.min(), relief.max()
    relief = (relief - lo) / (hi - lo) if hi > lo else np.full_like(relief, 0.5)
    valley = np.array([0.16, 0.34, 0.18])
    ridge = np.array([0.62, 0.55, 0.42])
    img = valley + relief[:, :, None] * (ridge - valley)
    img += rng.normal(0.0, 0.01, size=img.shape)
    return np.clip(img, 0.05, 0.95)


def _urban_blocks_anchor(rng: np.random.Generator, patch: int) -> np.ndarray:
    road = np.array([0.15, 0.15, 0.17])
    img = np.tile(road, (patch, patch, 1))

    def cuts(extent):
        edges = [0]
        while edges[-1] < extent:
            edges.append(edges[-1] + int(rng.integers(14, 30)))
        edges[-1] = extent
        return edges

    row_edges = cuts(patch)
    col_edges = cuts(patch)
    road_w = 2
    for r0, r1 in zip(row_edges, row_edges[1:]):
        for c0, c1 in zip(col_edges, col_edges[1:]):
            cls = rng.random()
            if cls < 0.62:  # built block, bright enough to read as roofline
                base = rng.uniform(0.58, 0.82)
                color = base + rng.uniform(-0.03, 0.03, size=3)
            elif cls < 0.85:  # park
                color = np.array([0.22, 0.44, 0.26]) + rng.uniform(-0.04, 0.04, size=3)
            else:  # plaza / lot
                color = np.array([0.36, 0.38, 0.44]) + rng.uniform(-0.03, 0.03, size=3)
            img[r0 + road_w : r1, c0 + road_w : c1] = np.clip(color, 0.05, 0.95)
    return img


_ANCHORS = {
    "hills": _hills_anchor,
    "urban_blocks": _urban_blocks_anchor,
}


def make_anchor(kind: str, seed: int, patch: int = 256, gsd: float = 64.0,
                anchor: tuple[float, float] = (0.0, 0.0)) -> RasterGrid:
    """Procedurally generate a named coarsest-level anchor image.

    kind selects the terrain class ("hills" or "urban_blocks"); the same
    (kind, seed, patch) always yields identical pixels.
    """
    try:
        builder = _ANCHORS[kind]
    except KeyError:
        raise RegistryError(f"unknown anchor kind {kind!r}; known: {sorted(_ANCHORS)}") from None
    rng = np.random.Generator(np.random.PCG64(seed))
    data = builder(rng, int(patch))
    return RasterGrid(data, gsd=float(gsd), anchor=anchor)


def known_anchors() -> list[str]:
    return sorted(_ANCHORS)
