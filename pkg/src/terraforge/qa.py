"""Spatial-reasoning ground truth and question generation.

An explicit heightfield scene answers questions about itself: heights,
object counts, per-view depth orderings, and region statistics all come
straight from the geometry, so every emitted answer can be recomputed
and checked.  The module extracts that ground truth, renders camera
paths over the baked mesh, and instantiates one question per task
family (spatial, morphology, counting, geometry, caption) per image
from deterministic templates.

Raised objects are 4-connected regions of the height map standing more
than a threshold above the local terrain, where "local terrain" is a
square median filter of the heights; the filter swallows compact
structures but keeps broad landforms, so a tower on a hillside measures
against the hillside, not sea level.

Terrain morphology is classified from three slope statistics with the
fixed thresholds below (slopes in meters per meter of the terrain
surface, objects removed):

* flat: total terrain relief under ``_FLAT_RELIEF`` meters;
* rugged: more than ``_RUGGED_STEEP_FRACTION`` of pixels steeper
  than ``_STEEP_SLOPE``;
* terraced: at least ``_TERRACE_PLATEAU_FRACTION`` of pixels flatter
  than ``_PLATEAU_SLOPE`` while at least ``_TERRACE_STEP_FRACTION``
  are steep (broad flats broken by sharp steps);
* sloped: everything else.

Questions come from template tables.  Each task family ends with a
template that applies to any scene, so no task is ever skipped; a
seeded generator picks among the applicable templates and fills in
subjects, which makes records a pure function of (ground truth, image
reference, seed).
"""

from __future__ import annotations

import json
import logging
import math
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

from .core.camera import CameraView, Intrinsics
from .core.mesh import TexturedMesh
from .errors import ContractError
from .lift import HeightMap
from .multiview import Trajectory, circular_trajectory, rasterize, save_view_bundle

logger = logging.getLogger(__name__)

__all__ = [
    "TASKS",
    "ANSWER_FORMATS",
    "TERRAIN_PATTERNS",
    "REGIONS",
    "ObjectComponent",
    "SceneGroundTruth",
    "QARecord",
    "QATemplate",
    "DEFAULT_TEMPLATES",
    "extract_ground_truth",
    "derive_qa",
    "render_trajectory",
    "save_qa_records",
    "load_qa_records",
    "dataset_manifest",
]

TASKS = ("spatial", "morphology", "counting", "geometry", "caption")
ANSWER_FORMATS = ("boolean", "number", "text", "choice", "list")
TERRAIN_PATTERNS = ("flat", "sloped", "terraced", "rugged")
# region names follow map orientation: row 0 is the north edge (largest
# world y) and column 0 the west edge (smallest world x)
REGIONS = ("north-west", "north-east", "south-west", "south-east")

_PLATEAU_SLOPE = 0.05
_STEEP_SLOPE = 0.5
_FLAT_RELIEF = 1.0
_RUGGED_STEEP_FRACTION = 0.10
_TERRACE_PLATEAU_FRACTION = 0.60
_TERRACE_STEP_FRACTION = 0.005


def _component_name(i: int) -> str:
    """0 -> A, 25 -> Z, 26 -> AA (spreadsheet column style)."""
    name = ""
    i += 1
    while i:
        i, r = divmod(i - 1, 26)
        name = chr(65 + r) + name
    return name


@dataclass(frozen=True)
class ObjectComponent:
    """One raised structure found in the height map.

    Attributes:
        name: scan-order letter label (A, B, ...).
        centroid: world (x, y, z) of the component, z the mean surface
            height over its footprint.
        footprint_area: footprint in square meters.
        height: peak meters above the local terrain surface.
        pixels: footprint size in height-map pixels.
    """

    name: str
    centroid: tuple[float, float, float]
    footprint_area: float
    height: float
    pixels: int


@dataclass(frozen=True)
class SceneGroundTruth:
    """Everything the question templates may refer to.

    Attributes:
        region_heights: per-region {min, mean, max} in meters over the
            full surface; keys are the four quadrants plus "scene".
        components: raised structures in scan order.
        view_depths: camera-space centroid depth per view index, one
            entry per component in component order.
        depth_order: component names nearest-first per view index,
            depth ties broken by name.
        higher_than: (taller, shorter) name pairs whose height gap
            exceeds the tie tolerance.
        nearer_than: per view index, (nearer, farther) name pairs with
            depth gap beyond the tie tolerance.
        terrain: slope statistics of the object-free terrain surface:
            relief_range (m), plateau_fraction, steep_fraction.
        tie_tolerance: margin in meters below which order is a tie.
        object_threshold: meters above local terrain defining objects.
    """

    region_heights: dict[str, dict[str, float]]
    components: tuple[ObjectComponent, ...]
    view_depths: dict[int, tuple[float, ...]]
    depth_order: dict[int, tuple[str, ...]]
    higher_than: frozenset[tuple[str, str]]
    nearer_than: dict[int, frozenset[tuple[str, str]]]
    terrain: dict[str, float]
    tie_tolerance: float
    object_threshold: float

    @property
    def n_objects(self) -> int:
        return len(self.components)

    def component(self, name: str) -> ObjectComponent:
        for comp in self.components:
            if comp.name == name:
                return comp
        raise KeyError(name)

    def terrain_pattern(self) -> str:
        """Classify the terrain with the module's fixed thresholds."""
        if self.terrain["relief_range"] < _FLAT_RELIEF:
            return "flat"
        if self.terrain["steep_fraction"] > _RUGGED_STEEP_FRACTION:
            return "rugged"
        if (self.terrain["plateau_fraction"] >= _TERRACE_PLATEAU_FRACTION
                and self.terrain["steep_fraction"] >= _TERRACE_STEP_FRACTION):
            return "terraced"
        return "sloped"

    def strictly_ordered_views(self) -> tuple[int, ...]:
        """Views whose component depths are pairwise beyond ties."""
        out = []
        for k in sorted(self.view_depths):
            depths = sorted(self.view_depths[k])
            if len(depths) >= 2 and all(
                    b - a > self.tie_tolerance for a, b in zip(depths, depths[1:])):
                out.append(k)
        return tuple(out)


def _region_slices(height: int, width: int) -> dict[str, tuple[slice, slice]]:
    r, c = height // 2, width // 2
    return {
        "north-west": (slice(0, r), slice(0, c)),
        "north-east": (slice(0, r), slice(c, width)),
        "south-west": (slice(r, height), slice(0, c)),
        "south-east": (slice(r, height), slice(c, width)),
    }


def _stats(values: np.ndarray) -> dict[str, float]:
    return {"min": float(values.min()), "mean": float(values.mean()),
            "max": float(values.max())}


def extract_ground_truth(mesh: TexturedMesh | None, height_map: HeightMap,
                         views: Sequence[CameraView] = (),
                         object_threshold: float = 2.0,
                         terrain_window: int = 15,
                         tie_tolerance: float = 0.5) -> SceneGroundTruth:
    """Derive verifiable scene facts from the height map and poses.

    Objects are 4-connected regions rising more than
    ``object_threshold`` meters above the local terrain median
    (square window of ``terrain_window`` pixels).  Depth orderings
    project component centroids into each view's camera frame; no
    rendering is involved, so bare posed views suffice.  ``mesh`` is
    optional and only cross-checked against the height map (the mesh
    carries one vertex per height pixel), keeping the two sources of
    truth honest.

    An empty scene is not an error: the result simply has no
    components and empty relation tables.
    """
    if not isinstance(height_map, HeightMap):
        raise ContractError(f"expected a HeightMap, got {type(height_map).__name__}")
    if not object_threshold > 0.0:
        raise ContractError(f"object threshold must be positive, got {object_threshold}")
    if terrain_window < 1 or terrain_window % 2 == 0:
        raise ContractError(f"terrain window must be odd and >= 1, got {terrain_window}")
    if tie_tolerance < 0.0:
        raise ContractError(f"tie tolerance must be >= 0, got {tie_tolerance}")
    z = height_map.heights
    rows, cols = z.shape
    if mesh is not None:
        if len(mesh.vertices) != z.size or not np.allclose(
                mesh.vertices[:, 2], z.ravel(), atol=1e-6):
            raise ContractError("mesh vertices do not match the height map")
    indices = {v.index for v in views}
    if len(indices) != len(views):
        raise ContractError("views carry duplicate indices")

    terrain = ndimage.median_filter(z, size=terrain_window, mode="nearest")
    relief = z - terrain
    labels, count = ndimage.label(relief > object_threshold)

    gsd = height_map.gsd
    ax, ay = height_map.anchor
    components = []
    for i in range(1, count + 1):
        ys, xs = np.nonzero(labels == i)
        components.append(ObjectComponent(
            name=_component_name(i - 1),
            centroid=(float(ax + xs.mean() * gsd), float(ay - ys.mean() * gsd),
                      float(z[ys, xs].mean())),
            footprint_area=float(ys.size * gsd * gsd),
            height=float(relief[ys, xs].max()),
            pixels=int(ys.size),
        ))
    components = tuple(components)

    region_heights = {name: _stats(z[sl]) for name, sl in
                      _region_slices(rows, cols).items()}
    region_heights["scene"] = _stats(z)

    gy, gx = np.gradient(terrain, gsd)
    slope = np.hypot(gx, gy)
    terrain_stats = {
        "relief_range": float(terrain.max() - terrain.min()),
        "plateau_fraction": float((slope <= _PLATEAU_SLOPE).mean()),
        "steep_fraction": float((slope >= _STEEP_SLOPE).mean()),
    }

    centroids = np.array([c.centroid for c in components], dtype=np.float64)
    view_depths: dict[int, tuple[float, ...]] = {}
    depth_order: dict[int, tuple[str, ...]] = {}
    nearer_than: dict[int, frozenset] = {}
    for view in views:
        if centroids.size:
            depths = tuple(float(d) for d in centroids @ view.rotation[2]
                           + view.translation[2])
        else:
            depths = ()
        k = int(view.index)
        view_depths[k] = depths
        order = sorted(zip(depths, (c.name for c in components)))
        depth_order[k] = tuple(name for _, name in order)
        nearer_than[k] = frozenset(
            (near, far)
            for di, near in zip(depths, (c.name for c in components))
            for dj, far in zip(depths, (c.name for c in components))
            if dj - di > tie_tolerance)

    higher_than = frozenset(
        (a.name, b.name)
        for a in components for b in components
        if a.height - b.height > tie_tolerance)

    if count:
        logger.debug("found %d raised component(s) above %.2f m", count,
                     object_threshold)
    return SceneGroundTruth(
        region_heights=region_heights,
        components=components,
        view_depths=view_depths,
        depth_order=depth_order,
        higher_than=higher_than,
        nearer_than=nearer_than,
        terrain=terrain_stats,
        tie_tolerance=float(tie_tolerance),
        object_threshold=float(object_threshold),
    )


# ---------------------------------------------------------------------------
# question templates


@dataclass(frozen=True)
class QARecord:
    """One question about one image, answerable from ground truth."""

    image: str
    task: str
    question: str
    answer: object
    answer_format: str
    provenance: dict

    def __post_init__(self):
        if self.task not in TASKS:
            raise ContractError(f"unknown task {self.task!r}")
        if self.answer_format not in ANSWER_FORMATS:
            raise ContractError(f"unknown answer format {self.answer_format!r}")

    def to_json(self) -> dict:
        return {"image": self.image, "task": self.task,
                "question": self.question, "answer": self.answer,
                "format": self.answer_format, "provenance": self.provenance}

    @classmethod
    def from_json(cls, obj: dict) -> "QARecord":
        return cls(obj["image"], obj["task"], obj["question"], obj["answer"],
                   obj["format"], obj.get("provenance", {}))


@dataclass(frozen=True)
class QATemplate:
    """A question pattern: when it applies and how to instantiate it.

    ``build(gt, rng)`` returns (question, answer, answer_format,
    provenance) and may consume the generator; ``applies`` must not, so
    template selection stays deterministic.
    """

    name: str
    task: str
    applies: Callable[[SceneGroundTruth], bool]
    build: Callable[[SceneGroundTruth, np.random.Generator], tuple]


def _pick(rng: np.random.Generator, seq):
    return seq[int(rng.integers(len(seq)))]


def _build_taller_boolean(gt, rng):
    tall, short = _pick(rng, sorted(gt.higher_than))
    if int(rng.integers(2)):
        question = f"Is structure {tall} taller than structure {short}?"
        answer = "yes"
    else:
        question = f"Is structure {short} taller than structure {tall}?"
        answer = "no"
    return question, answer, "boolean", {
        "template": "taller-boolean", "fields": ["components.height"],
        "subjects": [tall, short]}


def _build_region_boolean(gt, rng):
    i = int(rng.integers(4))
    j = (i + 1 + int(rng.integers(3))) % 4
    a, b = REGIONS[i], REGIONS[j]
    higher = gt.region_heights[a]["mean"] > gt.region_heights[b]["mean"]
    question = f"Is the {a} region higher on average than the {b} region?"
    return question, ("yes" if higher else "no"), "boolean", {
        "template": "region-boolean", "fields": ["region_heights.mean"],
        "subjects": [a, b]}


def _widest_region(gt):
    spans = sorted(((gt.region_heights[r]["max"] - gt.region_heights[r]["min"], r)
                    for r in REGIONS), reverse=True)
    return spans[0][1] if spans[0][0] > spans[1][0] else None


def _build_widest_region(gt, rng):
    question = ("Which region spans the widest range of elevations: "
                "north-west, north-east, south-west, or south-east?")
    return question, _widest_region(gt), "choice", {
        "template": "widest-region", "fields": ["region_heights.min",
                                                "region_heights.max"]}


def _build_pattern_choice(gt, rng):
    question = ("Which option best describes the terrain relief: "
                "flat, sloped, terraced, or rugged?")
    return question, gt.terrain_pattern(), "choice", {
        "template": "terrain-pattern", "fields": ["terrain"]}


def _build_count_above(gt, rng):
    levels = sorted({int(math.floor(c.height)) for c in gt.components})
    threshold = _pick(rng, levels)
    answer = int(sum(1 for c in gt.components if c.height > threshold))
    question = (f"How many structures rise more than {threshold} m above "
                "the surrounding terrain?")
    return question, answer, "number", {
        "template": "count-above", "fields": ["components.height"],
        "subjects": [threshold]}


def _build_count_total(gt, rng):
    question = "How many distinct raised structures does the scene contain?"
    return question, int(gt.n_objects), "number", {
        "template": "count-total", "fields": ["components"]}


def _build_taller_choice(gt, rng):
    tall, short = _pick(rng, sorted(gt.higher_than))
    first, second = (tall, short) if int(rng.integers(2)) else (short, tall)
    question = f"Which structure is taller, {first} or {second}?"
    return question, tall, "choice", {
        "template": "taller-choice", "fields": ["components.height"],
        "subjects": [first, second]}


def _build_depth_list(gt, rng):
    k = _pick(rng, gt.strictly_ordered_views())
    question = (f"List the structures from nearest to farthest as seen "
                f"from camera {k}.")
    return question, list(gt.depth_order[k]), "list", {
        "template": "depth-list", "fields": ["depth_order"], "view": k}


def _build_relief_span(gt, rng):
    span = gt.region_heights["scene"]["max"] - gt.region_heights["scene"]["min"]
    question = "Over how many meters does the surface elevation vary across the scene?"
    return question, round(float(span), 1), "number", {
        "template": "relief-span", "fields": ["region_heights.scene"]}


def _build_caption(gt, rng):
    pattern = gt.terrain_pattern()
    if gt.n_objects == 0:
        answer = f"A {pattern} landscape with no raised structures."
    else:
        tallest = sorted(gt.components, key=lambda c: (-c.height, c.name))[0]
        plural = "s" if gt.n_objects != 1 else ""
        answer = (f"A {pattern} scene with {gt.n_objects} raised "
                  f"structure{plural}; the tallest, {tallest.name}, stands "
                  f"{tallest.height:.1f} m above the terrain.")
    question = "Provide a one-sentence caption describing the scene."
    return question, answer, "text", {
        "template": "caption-summary", "fields": ["terrain", "components"]}


def _always(gt) -> bool:
    return True


DEFAULT_TEMPLATES: dict[str, tuple[QATemplate, ...]] = {
    "spatial": (
        QATemplate("taller-boolean", "spatial",
                   lambda gt: bool(gt.higher_than), _build_taller_boolean),
        QATemplate("region-boolean", "spatial", _always, _build_region_boolean),
    ),
    "morphology": (
        QATemplate("widest-region", "morphology",
                   lambda gt: _widest_region(gt) is not None, _build_widest_region),
        QATemplate("terrain-pattern", "morphology", _always, _build_pattern_choice),
    ),
    "counting": (
        QATemplate("count-above", "counting",
                   lambda gt: gt.n_objects > 0, _build_count_above),
        QATemplate("count-total", "counting", _always, _build_count_total),
    ),
    "geometry": (
        QATemplate("taller-choice", "geometry",
                   lambda gt: bool(gt.higher_than), _build_taller_choice),
        QATemplate("depth-list", "geometry",
                   lambda gt: bool(gt.strictly_ordered_views()), _build_depth_list),
        QATemplate("relief-span", "geometry", _always, _build_relief_span),
    ),
    "caption": (
        QATemplate("caption-summary", "caption", _always, _build_caption),
    ),
}


def derive_qa(ground_truth: SceneGroundTruth, image_ref: str,
              templates: dict[str, tuple[QATemplate, ...]] | None = None,
              seed: int = 0) -> list[QARecord]:
    """Instantiate one record per task family for one image.

    The generator is seeded from (seed, image reference), so the same
    scene yields fresh subjects per image while any rerun reproduces
    records bit for bit.  Within each task the template is picked
    uniformly among those whose preconditions hold; the shipped tables
    end with an unconditional template per task, so no task is ever
    skipped.

    Raises:
        ContractError: template table missing a task, or no template
            of a task applying to this scene.
    """
    tables = DEFAULT_TEMPLATES if templates is None else templates
    missing = [t for t in TASKS if not tables.get(t)]
    if missing:
        raise ContractError(f"templates missing tasks: {missing}")
    if not isinstance(seed, (int, np.integer)) or seed < 0:
        raise ContractError(f"seed must be a non-negative integer, got {seed!r}")
    rng = np.random.default_rng(
        np.random.SeedSequence([int(seed),
                                zlib.crc32(str(image_ref).encode("utf-8"))]))
    records = []
    for task in TASKS:
        applicable = [t for t in tables[task] if t.applies(ground_truth)]
        if not applicable:
            raise ContractError(f"no {task} template applies to this scene")
        template = _pick(rng, applicable)
        question, answer, fmt, provenance = template.build(ground_truth, rng)
        records.append(QARecord(str(image_ref), task, question, answer,
                                fmt, provenance))
    return records


# ---------------------------------------------------------------------------
# rendering and record files


def render_trajectory(mesh: TexturedMesh,
                      poses: Sequence[CameraView] | Trajectory,
                      intrinsics: Intrinsics | None = None,
                      out_dir: str | Path | None = None) -> list[CameraView]:
    """Rasterize a textured mesh along a camera path.

    ``poses`` is either a list of posed cameras or a ring Trajectory
    (then ``intrinsics`` is required).  With ``out_dir`` the rendered
    views are also written as an image bundle with cameras.json.
    """
    if isinstance(poses, Trajectory):
        if intrinsics is None:
            raise ContractError("a Trajectory needs explicit intrinsics")
        poses = circular_trajectory(poses.center, poses.radius, poses.n_views,
                                    poses.elevation_deg, intrinsics)
    if not poses:
        raise ContractError("no poses to render")
    views = [rasterize(mesh, pose) for pose in poses]
    if out_dir is not None:
        save_view_bundle(views, out_dir)
    return views


def save_qa_records(records: Sequence[QARecord], path: str | Path) -> None:
    """Write records as JSON lines, one object per record."""
    lines = [json.dumps(r.to_json(), sort_keys=True) for r in records]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def load_qa_records(path: str | Path) -> list[QARecord]:
    records = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            records.append(QARecord.from_json(json.loads(line)))
    return records


def dataset_manifest(records: Sequence[QARecord],
                     domains: dict[str, str] | None = None) -> dict:
    """Summary counts for a record set.

    ``balanced`` is True when every image carries exactly one record
    per task.  ``domains`` optionally maps image refs to a domain name
    (e.g. man-made vs natural) to report the split; unknown images
    count under "unknown".
    """
    images = sorted({r.image for r in records})
    per_task = {t: 0 for t in TASKS}
    per_format = {f: 0 for f in ANSWER_FORMATS}
    per_image: dict[str, dict[str, int]] = {im: {t: 0 for t in TASKS}
                                            for im in images}
    for r in records:
        per_task[r.task] += 1
        per_format[r.answer_format] += 1
        per_image[r.image][r.task] += 1
    balanced = bool(images) and all(
        count == 1 for counts in per_image.values() for count in counts.values())
    manifest = {
        "images": len(images),
        "records": len(records),
        "per_task": per_task,
        "per_format": per_format,
        "balanced": balanced,
    }
    if domains is not None:
        split: dict[str, int] = {}
        for im in images:
            split[domains.get(im, "unknown")] = split.get(domains.get(im, "unknown"), 0) + 1
        manifest["domain_split"] = {
            k: split[k] / len(images) for k in sorted(split)} if images else {}
    return manifest
