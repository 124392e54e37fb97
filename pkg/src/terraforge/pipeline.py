"""End-to-end scene pipeline over an on-disk bundle.

One configuration drives a fixed stage chain

    anchor -> cascade -> lift -> render -> inpaint -> bake
           -> metrics -> qa -> export

where every stage reads its inputs from the bundle directory and writes
its outputs back, never passing live objects forward.  That makes each
stage rerunnable in isolation: a stage launched against cached upstream
files sees exactly what it saw inside the full run, including any
quantization the file formats impose.  A manifest records per-stage
inputs, outputs, and a content hash; it carries no timestamps, so two
runs of the same configuration produce byte-identical bundles.

The cascade descends the scale ladder in zoom mode by default: each
finer level re-centers on the middle 1/N of the previous extent and
regenerates a full patch there, so every level materializes the same
pixel count and the finest level is a scene-sized crop.  World-anchored
noise makes the crops independent of how the extent is windowed.  Mode
"full" refines entire extents instead, multiplying the pixel count by
N^2 per level; it is intended for small anchors.

All randomness flows from the single config seed; there is no other
entropy source anywhere in the chain.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bake import BakeConfig, bake
from .cascade import ScaleLadder, downsample_box, make_anchor, refine_once
from .core.camera import Intrinsics
from .core.mesh import TexturedMesh
from .core.raster import RasterGrid, load_raster_png, save_raster_png
from .errors import ContractError, MetricError, StageError
from .export import check_glb_structure, export_mesh
from .lift import (HeightMap, height_to_mesh, infer_height, load_heightmap,
                   save_heightmap)
from .metrics import (FeatureSet, SeamSpec, describe_images, fid, msg,
                      reprojection_consistency)
from .multiview import (circular_trajectory, fit_trajectory, inpaint_views,
                        load_view_bundle, make_batch, rasterize,
                        save_view_bundle, ViewEmbeddingTable)
from .qa import dataset_manifest, derive_qa, extract_ground_truth, save_qa_records
from .sampling import (BlockCodec, NoiseField, NoiseSchedule,
                       default_step_list, get_backend, known_backends)
from .tiler import plan_windows

logger = logging.getLogger(__name__)

__all__ = ["STAGES", "PipelineConfig", "run_pipeline", "bundle_digest"]

STAGES = ("anchor", "cascade", "lift", "render", "inpaint", "bake",
          "metrics", "qa", "export")

_BACKEND_SLOTS = ("refine", "height", "facade")


@dataclass
class PipelineConfig:
    """Everything a pipeline run depends on, JSON-serializable.

    The seed is mandatory: nothing in the chain may draw entropy from
    anywhere else.  Backend slots name registry entries for the three
    generative stages (cascade refinement, height inference, facade
    inpainting); they are resolved at validation time so a typo fails
    before any work starts.
    """

    seed: int
    anchor_kind: str = "hills"
    ladder: ScaleLadder = field(default_factory=ScaleLadder.default)
    cascade_mode: str = "zoom"
    backends: dict = field(default_factory=lambda: dict(
        refine="refiner", height="height", facade="facade"))
    schedule_T: int = 50
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    n_steps: int = 6
    window_px: int = 64
    merge: str = "centerCrop"
    height_range: tuple = (0.0, 80.0)
    height_window_px: int = 128
    mesh_factor: int = 4
    n_views: int = 8
    elevation_deg: float = 30.0
    fov_deg: float = 45.0
    view_size: int = 96
    bake: dict = field(default_factory=dict)
    out_dir: str = "bundle"
    stages: dict = field(default_factory=dict)
    threads: int = 1

    def __post_init__(self):
        if not isinstance(self.seed, (int, np.integer)) or isinstance(self.seed, bool) \
                or self.seed < 0:
            raise ContractError(f"seed must be a non-negative integer, got {self.seed!r}")
        self.seed = int(self.seed)
        if self.cascade_mode not in ("zoom", "full"):
            raise ContractError(f"cascade_mode must be 'zoom' or 'full', got {self.cascade_mode!r}")
        missing = [s for s in _BACKEND_SLOTS if s not in self.backends]
        if missing:
            raise ContractError(f"backend slots missing: {missing}")
        unknown = [n for n in self.backends.values() if n not in known_backends()]
        if unknown:
            raise ContractError(
                f"unknown backends {unknown}; registry has {known_backends()}")
        if self.n_steps < 2:
            raise ContractError(f"need at least 2 sampling steps, got {self.n_steps}")
        if self.mesh_factor < 1 or self.ladder.patch % self.mesh_factor:
            raise ContractError(
                f"mesh_factor {self.mesh_factor} must divide the patch size "
                f"{self.ladder.patch}")
        if self.view_size % 4:
            raise ContractError(f"view_size must be divisible by 4, got {self.view_size}")
        if self.ladder.patch < self.window_px:
            raise ContractError(
                f"window_px {self.window_px} exceeds the level extent "
                f"{self.ladder.patch}")
        if self.ladder.patch < self.height_window_px:
            raise ContractError(
                f"height window {self.height_window_px} exceeds the level "
                f"extent {self.ladder.patch}")
        bad = [s for s in self.stages if s not in STAGES]
        if bad:
            raise ContractError(f"unknown stage toggles {bad}; stages are {list(STAGES)}")
        self.height_range = tuple(float(v) for v in self.height_range)
        BakeConfig(**self.bake)
        self.schedule()

    def schedule(self) -> NoiseSchedule:
        return NoiseSchedule.linear(self.schedule_T, self.beta_start, self.beta_end)

    def step_list(self) -> list:
        return default_step_list(self.schedule_T, self.n_steps)

    def stage_enabled(self, name: str) -> bool:
        return bool(self.stages.get(name, True))

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "anchor": self.anchor_kind,
            "ladder": json.loads(self.ladder.to_json()),
            "cascade_mode": self.cascade_mode,
            "backends": dict(self.backends),
            "schedule": {"T": self.schedule_T, "beta_start": self.beta_start,
                         "beta_end": self.beta_end},
            "n_steps": self.n_steps,
            "window_px": self.window_px,
            "merge": self.merge,
            "height": {"range": list(self.height_range),
                       "window_px": self.height_window_px},
            "mesh_factor": self.mesh_factor,
            "trajectory": {"n_views": self.n_views,
                           "elevation_deg": self.elevation_deg,
                           "fov_deg": self.fov_deg,
                           "view_size": self.view_size},
            "bake": dict(self.bake),
            "out_dir": self.out_dir,
            "stages": dict(self.stages),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PipelineConfig":
        known = {"seed", "anchor", "ladder", "cascade_mode", "backends",
                 "schedule", "n_steps", "window_px", "merge", "height",
                 "mesh_factor", "trajectory", "bake", "out_dir", "stages",
                 "threads"}
        stray = sorted(set(obj) - known)
        if stray:
            raise ContractError(f"unknown config keys {stray}")
        if "seed" not in obj:
            raise ContractError("config must carry an explicit seed")
        sched = obj.get("schedule", {})
        traj = obj.get("trajectory", {})
        height = obj.get("height", {})
        kwargs = dict(
            seed=obj["seed"],
            anchor_kind=obj.get("anchor", "hills"),
            cascade_mode=obj.get("cascade_mode", "zoom"),
            n_steps=obj.get("n_steps", 6),
            window_px=obj.get("window_px", 64),
            merge=obj.get("merge", "centerCrop"),
            mesh_factor=obj.get("mesh_factor", 4),
            out_dir=obj.get("out_dir", "bundle"),
            threads=obj.get("threads", 1),
            schedule_T=sched.get("T", 50),
            beta_start=sched.get("beta_start", 1e-4),
            beta_end=sched.get("beta_end", 2e-2),
            n_views=traj.get("n_views", 8),
            elevation_deg=traj.get("elevation_deg", 30.0),
            fov_deg=traj.get("fov_deg", 45.0),
            view_size=traj.get("view_size", 96),
            height_range=tuple(height.get("range", (0.0, 80.0))),
            height_window_px=height.get("window_px", 128),
        )
        if "ladder" in obj:
            kwargs["ladder"] = ScaleLadder.from_json(json.dumps(obj["ladder"]))
        if "backends" in obj:
            kwargs["backends"] = dict(obj["backends"])
        if "bake" in obj:
            kwargs["bake"] = dict(obj["bake"])
        if "stages" in obj:
            kwargs["stages"] = {k: bool(v) for k, v in obj["stages"].items()}
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path: str | Path) -> "PipelineConfig":
        try:
            obj = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ContractError(f"config file {path} does not exist") from None
        except json.JSONDecodeError as err:
            raise ContractError(f"config file {path} is not valid JSON: {err}") from None
        return cls.from_json(obj)


# ---------------------------------------------------------------------------
# bundle plumbing


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def _stage_hash(root: Path, outputs: list[str]) -> str:
    digest = hashlib.sha256()
    for rel in sorted(outputs):
        digest.update(rel.encode("utf-8"))
        digest.update(_sha256(root / rel).encode("ascii"))
    return digest.hexdigest()


def bundle_digest(root: str | Path) -> str:
    """One hash over every stage hash in the bundle manifest."""
    manifest = json.loads((Path(root) / "manifest.json").read_text())
    digest = hashlib.sha256()
    for entry in manifest["stages"]:
        digest.update(entry["name"].encode("utf-8"))
        digest.update(entry.get("hash", "").encode("ascii"))
    return digest.hexdigest()


def _require(root: Path, rel: str, stage: str) -> Path:
    path = root / rel
    if not path.exists():
        raise StageError(stage, f"missing input {rel}; run the upstream stage first")
    return path


def _finest_rel(cfg: PipelineConfig) -> str:
    last = cfg.ladder.n_levels - 1
    return f"cascade/level_{last}.png" if last else "anchor/level_0.png"


def _load_scene_mesh(cfg: PipelineConfig, root: Path, stage: str):
    """Coarse mesh plus its height map from cached lift artifacts."""
    ortho = load_raster_png(_require(root, _finest_rel(cfg), stage))
    height = load_heightmap(_require(root, "lift/height.png", stage))
    f = cfg.mesh_factor
    if f > 1:
        ortho = downsample_box(ortho, f)
        height = HeightMap(downsample_box(height.raster, f), height.valid_range)
    tau = BakeConfig(**cfg.bake).tau
    return height_to_mesh(height, ortho, tau=tau), height


def _poses(cfg: PipelineConfig, mesh) -> list:
    ring = fit_trajectory(mesh, cfg.n_views, cfg.elevation_deg)
    intr = Intrinsics.from_fov(cfg.fov_deg, cfg.view_size, cfg.view_size)
    return circular_trajectory(ring.center, ring.radius, cfg.n_views,
                               cfg.elevation_deg, intr)


# ---------------------------------------------------------------------------
# stages; each returns (input relpaths, output relpaths)


def _stage_anchor(cfg: PipelineConfig, root: Path):
    raster = make_anchor(cfg.anchor_kind, cfg.seed, patch=cfg.ladder.patch,
                         gsd=cfg.ladder.coarsest)
    rel = "anchor/level_0.png"
    (root / "anchor").mkdir(parents=True, exist_ok=True)
    save_raster_png(raster, root / rel)
    return [], [rel, rel + ".json"]


def _stage_cascade(cfg: PipelineConfig, root: Path):
    inputs = ["anchor/level_0.png"]
    current = load_raster_png(_require(root, inputs[0], "cascade"))
    noise = NoiseField(cfg.seed)
    schedule = cfg.schedule()
    backend = get_backend(cfg.backends["refine"], schedule)
    (root / "cascade").mkdir(parents=True, exist_ok=True)
    outputs = []
    for index, target in enumerate(cfg.ladder.levels[1:], start=1):
        if cfg.cascade_mode == "zoom":
            inner = current.width // cfg.ladder.factor
            x0 = (current.width - inner) // 2
            y0 = (current.height - inner) // 2
            current = RasterGrid(
                current.data[y0:y0 + inner, x0:x0 + inner],
                gsd=current.gsd,
                anchor=(current.anchor[0] + x0 * current.gsd,
                        current.anchor[1] - y0 * current.gsd))
        current = refine_once(
            current, target, backend, noise, cfg.step_list(), schedule,
            factor=cfg.ladder.factor, window_px=cfg.window_px, merge=cfg.merge,
            threads=cfg.threads)
        rel = f"cascade/level_{index}.png"
        save_raster_png(current, root / rel)
        outputs += [rel, rel + ".json"]
        current = load_raster_png(root / rel)
        logger.info("cascade level %d: %dx%d px at %.3g m/px", index,
                    current.width, current.height, current.gsd)
    return inputs, outputs


def _stage_lift(cfg: PipelineConfig, root: Path):
    rel = _finest_rel(cfg)
    ortho = load_raster_png(_require(root, rel, "lift"))
    schedule = cfg.schedule()
    backend = get_backend(cfg.backends["height"], schedule)
    height = infer_height(
        ortho, backend, None, NoiseField(cfg.seed), cfg.step_list(), schedule,
        height_range=cfg.height_range, window_px=cfg.height_window_px,
        threads=cfg.threads)
    (root / "lift").mkdir(parents=True, exist_ok=True)
    save_heightmap(height, root / "lift/height.png")
    return [rel], ["lift/height.png", "lift/height.png.json"]


def _stage_render(cfg: PipelineConfig, root: Path):
    mesh, _ = _load_scene_mesh(cfg, root, "render")
    poses = _poses(cfg, mesh)
    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            views = list(pool.map(lambda p: rasterize(mesh, p), poses))
    else:
        views = [rasterize(mesh, p) for p in poses]
    save_view_bundle(views, root / "render")
    outputs = ["render/cameras.json"]
    for v in views:
        outputs += [f"render/view_{v.index:03d}_{kind}.png"
                    for kind in ("rgb", "mask", "depth")]
    return [_finest_rel(cfg), "lift/height.png"], outputs


def _stage_inpaint(cfg: PipelineConfig, root: Path):
    _require(root, "render/cameras.json", "inpaint")
    views = load_view_bundle(root / "render")
    codec = BlockCodec()
    schedule = cfg.schedule()
    backend = get_backend(cfg.backends["facade"], schedule, codec=codec,
                          seed=cfg.seed)
    table = ViewEmbeddingTable(len(views), codec.latent_channels, seed=cfg.seed)
    images = inpaint_views(make_batch(views, codec), backend, table,
                           NoiseField(cfg.seed), cfg.step_list(), schedule)
    save_view_bundle(views, root / "inpaint", images=images)
    outputs = ["inpaint/cameras.json"]
    for v in views:
        outputs += [f"inpaint/view_{v.index:03d}_{kind}.png"
                    for kind in ("rgb", "mask", "depth")]
    return ["render/cameras.json"], outputs


def _stage_bake(cfg: PipelineConfig, root: Path):
    _require(root, "inpaint/cameras.json", "bake")
    mesh, _ = _load_scene_mesh(cfg, root, "bake")
    views = load_view_bundle(root / "inpaint")
    result = bake(mesh, views, BakeConfig(**cfg.bake))
    out = root / "bake"
    out.mkdir(parents=True, exist_ok=True)
    baked = result.mesh
    for name, arr in (("vertices", baked.vertices), ("faces", baked.faces),
                      ("uv", baked.uv), ("face_class", baked.face_class),
                      ("face_textured", baked.face_textured),
                      ("atlas", baked.atlas.data)):
        np.save(out / f"{name}.npy", arr)
    save_raster_png(baked.atlas, out / "atlas.png")
    result.save_chart_table(out / "charts.json")
    (out / "meta.json").write_text(json.dumps(
        {"atlas_gsd": baked.atlas.gsd,
         "unseen_fraction": result.unseen_fraction}, sort_keys=True) + "\n")
    outputs = [f"bake/{n}.npy" for n in ("vertices", "faces", "uv",
                                         "face_class", "face_textured", "atlas")]
    outputs += ["bake/atlas.png", "bake/atlas.png.json", "bake/charts.json",
                "bake/meta.json"]
    return ["inpaint/cameras.json", "lift/height.png", _finest_rel(cfg)], outputs


def _load_baked_mesh(root: Path, stage: str) -> TexturedMesh:
    _require(root, "bake/meta.json", stage)
    meta = json.loads((root / "bake/meta.json").read_text())
    arrays = {n: np.load(root / f"bake/{n}.npy")
              for n in ("vertices", "faces", "uv", "face_class",
                        "face_textured", "atlas")}
    atlas = RasterGrid(arrays["atlas"], gsd=meta["atlas_gsd"])
    return TexturedMesh(arrays["vertices"], arrays["faces"], arrays["uv"],
                        atlas, arrays["face_class"], arrays["face_textured"])


def _stage_metrics(cfg: PipelineConfig, root: Path):
    finest_rel = _finest_rel(cfg)
    finest = load_raster_png(_require(root, finest_rel, "metrics"))
    inputs = [finest_rel, "lift/height.png", "inpaint/cameras.json"]
    mesh, height = _load_scene_mesh(cfg, root, "metrics")
    views = load_view_bundle(root / "inpaint")

    plan = plan_windows((finest.width, finest.height), cfg.window_px)
    report: dict = {"seed": cfg.seed}
    seams = SeamSpec.from_plan(plan)
    if seams.columns or seams.rows:
        report["seam_msg"] = msg(finest.data, seams)
        grad = np.abs(np.diff(finest.data, axis=1)).mean()
        report["interior_gradient"] = float(grad)
        report["seam_ratio"] = report["seam_msg"] / max(grad, 1e-12)

    try:
        consistency = reprojection_consistency(views, mesh,
                                               config=BakeConfig(**cfg.bake))
        report["reprojection_psnr"] = consistency["psnr"]
        report["reprojection_ssim"] = consistency["ssim"]
        per_view = consistency["per_view"]
    except MetricError as err:
        # a scene without facade pixels (no near-vertical faces) has
        # nothing for the cross-view protocol to score
        logger.info("reprojection consistency unavailable: %s", err)
        per_view = []

    # distribution distance between generated tiles and the plain
    # upsampling they refined, as a detail-gain indicator
    prev = load_raster_png(_require(
        root, f"cascade/level_{cfg.ladder.n_levels - 2}.png"
        if cfg.ladder.n_levels > 2 else "anchor/level_0.png", "metrics"))
    factor = cfg.ladder.factor
    if cfg.cascade_mode == "zoom":
        inner = prev.width // factor
        x0 = (prev.width - inner) // 2
        y0 = (prev.height - inner) // 2
        coarse = prev.data[y0:y0 + inner, x0:x0 + inner]
    else:
        coarse = prev.data
    upsampled = np.repeat(np.repeat(coarse, factor, axis=0), factor, axis=1)
    tiles_fine = _image_tiles(finest.data, 16)
    tiles_coarse = _image_tiles(upsampled, 16)
    set_fine = FeatureSet.from_features(describe_images(tiles_fine))
    set_coarse = FeatureSet.from_features(describe_images(tiles_coarse))
    report["fid_vs_upsample"] = fid(set_coarse, set_fine)

    h = height.heights
    report["height_min"] = float(h.min())
    report["height_mean"] = float(h.mean())
    report["height_max"] = float(h.max())

    out = root / "metrics"
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value"])
        for key in sorted(report):
            writer.writerow([key, repr(report[key])])
    (out / "report.json").write_text(json.dumps(
        {**report, "per_view": per_view}, indent=2, sort_keys=True) + "\n")

    figures = _render_figures(out, finest, seams, per_view, h)
    outputs = ["metrics/report.csv", "metrics/report.json"] + figures
    return inputs, outputs


def _image_tiles(data: np.ndarray, tile: int) -> np.ndarray:
    rows = data.shape[0] // tile
    cols = data.shape[1] // tile
    trimmed = data[:rows * tile, :cols * tile]
    blocks = trimmed.reshape(rows, tile, cols, tile, data.shape[2])
    return blocks.transpose(0, 2, 1, 3, 4).reshape(rows * cols, tile, tile,
                                                   data.shape[2])


def _render_figures(out: Path, finest, seams, per_view, heights) -> list[str]:
    import matplotlib
    matplotlib.use("Agg", force=True)
    import matplotlib.pyplot as plt

    meta = {"Software": "terraforge"}
    written = []

    fig, ax = plt.subplots(figsize=(6, 3))
    step = np.abs(np.diff(finest.data, axis=1)).mean(axis=(0, 2))
    ax.plot(np.arange(1, finest.width), step, lw=0.7, label="column step")
    for c in seams.columns:
        ax.axvline(c, color="tab:red", lw=0.7, alpha=0.6)
    ax.set_xlabel("column")
    ax.set_ylabel("mean |difference|")
    ax.set_title("horizontal gradient vs window seams")
    ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    fig.savefig(out / "fig_seam_profile.png", dpi=110, metadata=meta)
    plt.close(fig)
    written.append("metrics/fig_seam_profile.png")

    fig, axes = plt.subplots(1, 2, figsize=(8, 3))
    idx = [v["view"] for v in per_view]
    axes[0].bar(idx, [v["psnr"] for v in per_view], color="tab:blue")
    axes[0].set_xlabel("view")
    axes[0].set_ylabel("PSNR [dB]")
    axes[1].bar(idx, [v["ssim"] for v in per_view], color="tab:green")
    axes[1].set_xlabel("view")
    axes[1].set_ylabel("SSIM")
    axes[1].set_ylim(0.0, 1.0)
    fig.suptitle("re-render agreement per view")
    fig.tight_layout()
    fig.savefig(out / "fig_view_quality.png", dpi=110, metadata=meta)
    plt.close(fig)
    written.append("metrics/fig_view_quality.png")

    fig, ax = plt.subplots(figsize=(5, 3))
    ax.hist(heights.ravel(), bins=64, color="tab:brown")
    ax.set_xlabel("height [m]")
    ax.set_ylabel("pixels")
    ax.set_title("lifted height distribution")
    fig.tight_layout()
    fig.savefig(out / "fig_height_hist.png", dpi=110, metadata=meta)
    plt.close(fig)
    written.append("metrics/fig_height_hist.png")
    return written


def _stage_qa(cfg: PipelineConfig, root: Path):
    _require(root, "inpaint/cameras.json", "qa")
    mesh, height = _load_scene_mesh(cfg, root, "qa")
    views = load_view_bundle(root / "inpaint")
    truth = extract_ground_truth(mesh, height, views)
    ref = _finest_rel(cfg)
    records = derive_qa(truth, ref, seed=cfg.seed)
    again = derive_qa(extract_ground_truth(mesh, height, views), ref,
                      seed=cfg.seed)
    if records != again:
        raise StageError("qa", "answers are not reproducible from ground truth")
    out = root / "qa"
    out.mkdir(parents=True, exist_ok=True)
    save_qa_records(records, out / "records.jsonl")
    (out / "manifest.json").write_text(json.dumps(
        dataset_manifest(records), indent=2, sort_keys=True) + "\n")
    return ([_finest_rel(cfg), "lift/height.png", "inpaint/cameras.json"],
            ["qa/records.jsonl", "qa/manifest.json"])


def _stage_export(cfg: PipelineConfig, root: Path):
    mesh = _load_baked_mesh(root, "export")
    out = root / "export"
    written = export_mesh(mesh, "obj", out / "scene.obj")
    written += export_mesh(mesh, "glb", out / "scene.glb")
    problems = check_glb_structure(out / "scene.glb")
    if problems:
        raise StageError("export", f"glTF structure check failed: {problems}")
    outputs = [str(p.relative_to(root)) for p in written]
    outputs.append("export/scene.png.json")
    return ["bake/meta.json"], sorted(outputs)


_STAGE_FN = {
    "anchor": _stage_anchor,
    "cascade": _stage_cascade,
    "lift": _stage_lift,
    "render": _stage_render,
    "inpaint": _stage_inpaint,
    "bake": _stage_bake,
    "metrics": _stage_metrics,
    "qa": _stage_qa,
    "export": _stage_export,
}


# ---------------------------------------------------------------------------
# driver


def _write_manifest(root: Path, entries: dict) -> None:
    payload = {"stages": [entries[name] for name in STAGES if name in entries]}
    (root / "manifest.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n")


def run_pipeline(config: PipelineConfig, out_dir: str | Path | None = None,
                 select: tuple | None = None) -> dict:
    """Run the stage chain (or a selection) against a bundle directory.

    With ``select`` only the named stages run, in chain order, against
    whatever upstream artifacts the bundle already holds; the manifest
    keeps the other stages' previous entries.  A disabled stage toggle
    ends a full run there and marks the rest skipped.

    Returns the manifest dict.

    Raises:
        StageError: a stage failed; the manifest on disk records the
            failure and every completed stage before it.
    """
    if not isinstance(config, PipelineConfig):
        raise ContractError(f"expected a PipelineConfig, got {type(config).__name__}")
    root = Path(out_dir if out_dir is not None else config.out_dir)
    root.mkdir(parents=True, exist_ok=True)
    (root / "config.json").write_text(
        json.dumps(config.to_json(), indent=2, sort_keys=True) + "\n")

    if select is not None:
        wanted = list(select)
        bad = [s for s in wanted if s not in STAGES]
        if bad:
            raise ContractError(f"unknown stages {bad}; stages are {list(STAGES)}")
        wanted.sort(key=STAGES.index)
    else:
        wanted = None

    entries: dict = {}
    manifest_path = root / "manifest.json"
    if manifest_path.exists():
        try:
            for entry in json.loads(manifest_path.read_text())["stages"]:
                entries[entry["name"]] = entry
        except (json.JSONDecodeError, KeyError):
            logger.warning("existing manifest is unreadable; rebuilding")

    stop_at = None
    for name in STAGES:
        if wanted is not None:
            if name not in wanted:
                continue
        else:
            if stop_at is not None or not config.stage_enabled(name):
                if stop_at is None:
                    stop_at = name
                entries[name] = {"name": name, "status": "skipped",
                                 "inputs": [], "outputs": [], "hash": ""}
                _write_manifest(root, entries)
                continue
        began = time.perf_counter()
        try:
            inputs, outputs = _STAGE_FN[name](config, root)
        except StageError as err:
            entries[name] = {"name": name, "status": "failed", "inputs": [],
                             "outputs": [], "hash": "", "error": str(err)}
            _write_manifest(root, entries)
            raise
        except Exception as err:
            entries[name] = {"name": name, "status": "failed", "inputs": [],
                             "outputs": [], "hash": "", "error": str(err)}
            _write_manifest(root, entries)
            raise StageError(name, str(err)) from err
        entries[name] = {
            "name": name,
            "status": "done",
            "inputs": sorted(inputs),
            "outputs": sorted(outputs),
            "hash": _stage_hash(root, outputs),
        }
        _write_manifest(root, entries)
        logger.info("stage %s done in %.2f s (%d files)", name,
                    time.perf_counter() - began, len(outputs))
    return json.loads(manifest_path.read_text())
