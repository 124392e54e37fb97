"""Ring-of-views rendering and joint facade inpainting.

A textured terrain mesh carries no imagery on its near-vertical faces:
nadir generation never saw them.  This module closes that gap.  It
places a ring of oblique cameras around a block, rasterizes the mesh
into per-view color/depth/mask buffers (the mask flags pixels whose
front-most face is vertical), and runs a joint deterministic diffusion
loop over all views at once so the painted facades agree where views
overlap.  Two mechanisms carry the cross-view coupling: a per-view
index embedding added to backend features, and an attention form whose
queries see keys only from the neighboring views on the ring.

The attention and embedding ops are exact and self-contained; the
inpainting loop drives any backend that declares ``multi_view`` and
implements ``epsilon_views``.
"""

from __future__ import annotations

import json
import logging
import threading
import weakref
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .core.camera import CameraView, Intrinsics, look_at
from .core.mesh import FACE_VERTICAL, TexturedMesh
from .core.raster import RasterGrid, bilinear_sample
from .errors import ContractError, GeometryError
from .sampling.codec import BlockCodec
from .sampling.noise_field import NoiseField, level_key
from .sampling.sampler import _check_step_list, ddim_step, forward_diffuse
from .sampling.schedule import NoiseSchedule
from .sampling.backends import register_backend

logger = logging.getLogger(__name__)

__all__ = [
    "Trajectory",
    "circular_trajectory",
    "fit_trajectory",
    "rasterize",
    "world_points",
    "reproject_image",
    "ViewEmbeddingTable",
    "inject_view_embedding",
    "cross_view_local_attention",
    "global_attention",
    "MultiViewBatch",
    "make_batch",
    "inpaint_views",
    "ProceduralFacadeBackend",
    "save_view_bundle",
    "load_view_bundle",
]

# noise-field domain tags 0..3 are taken by generation and ablation
# planes; view ring planes start here, one domain per view index
_DOMAIN_VIEW = 16


@dataclass(frozen=True)
class Trajectory:
    """Circular camera ring around a scene point.

    View i sits at azimuth i * 360 / n_views degrees (measured from +x,
    counter-clockwise), elevated above the horizontal plane through the
    center, at constant range, looking at the center.
    """

    center: tuple[float, float, float]
    radius: float
    n_views: int = 8
    elevation_deg: float = 30.0

    def __post_init__(self):
        if self.n_views < 1:
            raise ContractError(f"need at least 1 view, got {self.n_views}")
        if not self.radius > 0:
            raise ContractError(f"radius must be positive, got {self.radius}")
        if not 0.0 < self.elevation_deg < 90.0:
            raise ContractError("elevation must lie strictly between 0 and 90 degrees")
        object.__setattr__(self, "center", tuple(float(v) for v in self.center))

    def azimuths(self) -> np.ndarray:
        return np.arange(self.n_views) * (360.0 / self.n_views)

    def position(self, i: int) -> np.ndarray:
        az = np.radians(self.azimuths()[i])
        el = np.radians(self.elevation_deg)
        cx, cy, cz = self.center
        horiz = self.radius * np.cos(el)
        return np.array([
            cx + horiz * np.cos(az),
            cy + horiz * np.sin(az),
            cz + self.radius * np.sin(el),
        ])


def circular_trajectory(center, radius: float, n_views: int,
                        elevation_deg: float, intrinsics: Intrinsics) -> list[CameraView]:
    """Posed cameras on the ring, each looking at the center.

    Raises:
        GeometryError: degenerate look-at (coincident position/center).
    """
    traj = Trajectory(tuple(center), radius, n_views, elevation_deg)
    return [look_at(traj.position(i), traj.center, intrinsics, index=i)
            for i in range(n_views)]


def fit_trajectory(mesh: TexturedMesh, n_views: int = 8,
                   elevation_deg: float = 30.0,
                   radius_scale: float = 1.2) -> Trajectory:
    """Ring sized to a mesh: center of the bounding box, radius a fixed
    multiple of the box diagonal so the whole block fits in frame."""
    lo = mesh.vertices.min(axis=0)
    hi = mesh.vertices.max(axis=0)
    diag = float(np.linalg.norm(hi - lo))
    if diag <= 0:
        raise GeometryError("mesh bounding box is degenerate")
    center = (lo + hi) / 2.0
    return Trajectory(tuple(center), radius_scale * diag, n_views, elevation_deg)


def _edge(ax, ay, bx, by, px, py):
    return (bx - ax) * (py - ay) - (by - ay) * (px - ax)


def rasterize(mesh: TexturedMesh, camera: CameraView, fill: float = 0.5) -> CameraView:
    """Project the mesh into the camera with a deterministic z-buffer.

    Pixel centers sit at integer coordinates.  Coverage follows the
    top-left fill convention, so triangles sharing an edge paint each
    boundary pixel exactly once.  Depth ties keep the lower face index
    (faces are walked in order and later faces must be strictly
    closer).  Depth and texture coordinates interpolate perspective-
    correctly.  Textured faces sample the mesh atlas bilinearly;
    untextured faces and empty background take the flat ``fill`` value.
    Faces reaching behind the camera are skipped, not clipped: ring
    cameras sit outside the geometry, where that case cannot occur.

    Returns a copy of ``camera`` with rgb, depth, lateral_mask and
    face_ids buffers attached.
    """
    intr = camera.intrinsics
    W, H = intr.width, intr.height
    depth = np.full((H, W), np.inf)
    rgb = np.full((H, W, 3), float(fill))
    face_ids = np.full((H, W), -1, dtype=np.int32)

    screen, zcam = camera.project(mesh.vertices)
    atlas = mesh.atlas
    near = 1e-6

    for fi in range(len(mesh.faces)):
        vid = mesh.faces[fi]
        z3 = zcam[vid]
        if not (z3 > near).all():
            continue
        pts = screen[vid]
        uv3 = mesh.uv[fi]
        area = _edge(pts[0, 0], pts[0, 1], pts[1, 0], pts[1, 1], pts[2, 0], pts[2, 1])
        if area == 0.0:
            continue
        if area < 0.0:
            # normalize winding so interior edge values are positive
            pts = pts[[0, 2, 1]]
            z3 = z3[[0, 2, 1]]
            uv3 = uv3[[0, 2, 1]]
            area = -area

        x0 = max(int(np.ceil(pts[:, 0].min())), 0)
        x1 = min(int(np.floor(pts[:, 0].max())), W - 1)
        y0 = max(int(np.ceil(pts[:, 1].min())), 0)
        y1 = min(int(np.floor(pts[:, 1].max())), H - 1)
        if x0 > x1 or y0 > y1:
            continue
        px = np.arange(x0, x1 + 1, dtype=np.float64)[None, :]
        py = np.arange(y0, y1 + 1, dtype=np.float64)[:, None]

        inside = np.ones((y1 - y0 + 1, x1 - x0 + 1), dtype=bool)
        bary = np.empty((3, y1 - y0 + 1, x1 - x0 + 1))
        for k in range(3):
            a = pts[(k + 1) % 3]
            b = pts[(k + 2) % 3]
            e = _edge(a[0], a[1], b[0], b[1], px, py)
            top = a[1] == b[1] and b[0] > a[0]
            left = b[1] < a[1]
            inside &= (e > 0.0) | ((e == 0.0) & (top or left))
            bary[k] = e / area
        if not inside.any():
            continue

        inv_z = bary[0] / z3[0] + bary[1] / z3[1] + bary[2] / z3[2]
        z_pix = 1.0 / inv_z
        tile = depth[y0:y1 + 1, x0:x1 + 1]
        win = inside & (z_pix < tile)
        if not win.any():
            continue
        tile[win] = z_pix[win]
        face_ids[y0:y1 + 1, x0:x1 + 1][win] = fi
        if mesh.face_textured[fi]:
            wu = (bary[0] * (uv3[0, 0] / z3[0]) + bary[1] * (uv3[1, 0] / z3[1])
                  + bary[2] * (uv3[2, 0] / z3[2])) * z_pix
            wv = (bary[0] * (uv3[0, 1] / z3[0]) + bary[1] * (uv3[1, 1] / z3[1])
                  + bary[2] * (uv3[2, 1] / z3[2])) * z_pix
            sx = np.clip(wu[win] * atlas.width - 0.5, 0.0, atlas.width - 1.0)
            sy = np.clip(wv[win] * atlas.height - 0.5, 0.0, atlas.height - 1.0)
            rgb[y0:y1 + 1, x0:x1 + 1][win] = bilinear_sample(atlas, sx, sy)
        else:
            rgb[y0:y1 + 1, x0:x1 + 1][win] = float(fill)

    covered = face_ids >= 0
    lateral = np.zeros((H, W), dtype=bool)
    lateral[covered] = mesh.face_class[face_ids[covered]] == FACE_VERTICAL
    return CameraView(intr, camera.rotation, camera.translation, index=camera.index,
                      rgb=rgb, depth=depth, lateral_mask=lateral, face_ids=face_ids)


def world_points(view: CameraView) -> np.ndarray:
    """(H, W, 3) world position of each pixel's surface hit.

    Back-projects the depth buffer; rows/columns with infinite depth
    come out infinite as well, so gate on ``np.isfinite``.
    """
    if view.depth is None:
        raise ContractError("view has no depth buffer; rasterize first")
    intr = view.intrinsics
    u = np.arange(intr.width, dtype=np.float64)[None, :]
    v = np.arange(intr.height, dtype=np.float64)[:, None]
    z = view.depth
    cam = np.empty((intr.height, intr.width, 3))
    cam[:, :, 0] = (u - intr.cx) / intr.fx * z
    cam[:, :, 1] = (v - intr.cy) / intr.fy * z
    cam[:, :, 2] = z
    with np.errstate(invalid="ignore"):
        pts = (cam - view.translation) @ view.rotation
    pts[~np.isfinite(z)] = np.inf
    return pts


def reproject_image(dst_view: CameraView, src_view: CameraView,
                    src_image: np.ndarray, depth_tol: float = 0.5,
                    src_valid: np.ndarray | None = None):
    """Warp ``src_image`` into ``dst_view`` through known geometry.

    Each destination pixel with a surface hit is lifted to the world,
    projected into the source camera, and bilinearly sampled where the
    source depth buffer confirms the point is visible there.  All four
    bilinear taps must individually sit within ``depth_tol`` meters of
    the predicted depth, so samples never blend across an occlusion
    boundary onto a different surface.  Depth alone cannot separate
    surfaces meeting at a concave crease (a wall base against the
    ground), so ``src_valid`` optionally restricts the taps further,
    e.g. to the source view's facade mask.

    Returns:
        (warped, valid): (H, W, C) image and (H, W) bool mask of pixels
        that passed the visibility test.
    """
    if src_view.depth is None:
        raise ContractError("source view has no depth buffer")
    pts = world_points(dst_view)
    finite = np.isfinite(pts).all(axis=-1)
    H, W = finite.shape
    sw, sh = src_view.intrinsics.width, src_view.intrinsics.height
    warped = np.zeros((H, W, np.asarray(src_image).shape[-1]))
    valid = np.zeros((H, W), dtype=bool)
    if not finite.any():
        return warped, valid
    uv, z = src_view.project(pts[finite])
    ok = (z > 0) & (uv[:, 0] >= 0) & (uv[:, 0] <= sw - 1) \
        & (uv[:, 1] >= 0) & (uv[:, 1] <= sh - 1)
    if ok.any():
        iu = np.clip(np.floor(uv[ok, 0]).astype(np.int64), 0, sw - 2)
        iv = np.clip(np.floor(uv[ok, 1]).astype(np.int64), 0, sh - 2)
        seen = np.ones(iu.shape, dtype=bool)
        for dv in (0, 1):
            for du in (0, 1):
                tap = src_view.depth[iv + dv, iu + du]
                seen &= np.abs(tap - z[ok]) <= depth_tol
                if src_valid is not None:
                    seen &= src_valid[iv + dv, iu + du]
        ok[np.flatnonzero(ok)[~seen]] = False
    vflat = ok.copy()
    samp = np.zeros((finite.sum(), warped.shape[-1]))
    if ok.any():
        src = RasterGrid(np.asarray(src_image, dtype=np.float64), gsd=1.0)
        samp[ok] = bilinear_sample(src, uv[ok, 0], uv[ok, 1])
    warped[finite] = samp
    valid[finite] = vflat
    return warped, valid


class ViewEmbeddingTable:
    """One fixed pseudo-random vector per view index.

    Adding a distinct vector to each view's features before any
    cross-view mixing tags the views with their ring position, so the
    downstream computation is not permutation-invariant.
    """

    def __init__(self, n_views: int, width: int, seed: int = 0):
        if n_views < 1 or width < 1:
            raise ContractError("table needs n_views >= 1 and width >= 1")
        rng = np.random.default_rng(np.random.PCG64(seed))
        self._init_table(rng.normal(0.0, 1.0, size=(n_views, width)))

    def _init_table(self, table: np.ndarray):
        self.table = np.asarray(table, dtype=np.float64)
        self.n_views, self.width = self.table.shape
        if self.n_views > 1:
            diff = self.table[:, None, :] - self.table[None, :, :]
            dist = np.sqrt((diff ** 2).sum(axis=-1))
            off = ~np.eye(self.n_views, dtype=bool)
            if float(dist[off].min()) <= 1e-6:
                raise ContractError("view embeddings are not pairwise distinct")

    @classmethod
    def from_table(cls, table: np.ndarray) -> "ViewEmbeddingTable":
        obj = cls.__new__(cls)
        obj._init_table(np.asarray(table, dtype=np.float64))
        return obj

    def rotated(self, k: int) -> "ViewEmbeddingTable":
        """Table with rows advanced by k ring positions."""
        return ViewEmbeddingTable.from_table(np.roll(self.table, -k, axis=0))

    def inject(self, features: np.ndarray, i: int) -> np.ndarray:
        feats = np.asarray(features, dtype=np.float64)
        if feats.shape[-1] != self.width:
            raise ContractError(
                f"feature width {feats.shape[-1]} != embedding width {self.width}"
            )
        if not 0 <= i < self.n_views:
            raise ContractError(f"view index {i} outside table of {self.n_views}")
        return feats + self.table[i]


def inject_view_embedding(features: np.ndarray, i: int,
                          table: ViewEmbeddingTable) -> np.ndarray:
    """features + e_i broadcast over all leading (spatial) axes."""
    return table.inject(features, i)


def _canonical_sum(arr: np.ndarray, axis: int) -> np.ndarray:
    # sort addends by value first: any permutation of the inputs along
    # the axis then reduces to bit-identical output
    return np.sort(arr, axis=axis).sum(axis=axis)


def _attend(q: np.ndarray, ks: np.ndarray, vs: np.ndarray) -> np.ndarray:
    d = q.shape[-1]
    logits = (q @ ks.T) / np.sqrt(d)
    peak = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - peak)
    p = e / _canonical_sum(e, axis=1)[:, None]
    return _canonical_sum(p[:, :, None] * vs[None, :, :], axis=1)


def _check_qkv(Q, K, V):
    Q = np.asarray(Q, dtype=np.float64)
    K = np.asarray(K, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    if Q.ndim != 3 or K.ndim != 3 or V.ndim != 3:
        raise ContractError("Q, K, V must be (n_views, tokens, width) arrays")
    if Q.shape[0] == 0:
        raise ContractError("need at least one view")
    if Q.shape[-1] == 0:
        raise ContractError("query/key width must be positive")
    if K.shape != Q.shape or V.shape[:2] != Q.shape[:2]:
        raise ContractError(
            f"mismatched shapes Q{Q.shape} K{K.shape} V{V.shape}"
        )
    return Q, K, V


def cross_view_local_attention(Q, K, V, radius: int = 1) -> np.ndarray:
    """Per-view attention over the circular neighborhood of the ring.

    View i's queries attend to keys and values from views
    {i - radius, ..., i + radius} mod N, each neighbor counted once.
    Rows are softmax-normalized at scale 1/sqrt(d).  Reductions are
    canonical (value-sorted), so the output is a pure function of each
    neighborhood's key/value multiset: rotating the ring rotates the
    output bit-exactly, and when the neighborhood covers every view the
    result equals :func:`global_attention` bit-exactly.
    """
    Q, K, V = _check_qkv(Q, K, V)
    if radius < 0:
        raise ContractError(f"radius must be >= 0, got {radius}")
    n = Q.shape[0]
    out = np.empty((n, Q.shape[1], V.shape[2]))
    for i in range(n):
        neigh = []
        for off in range(-radius, radius + 1):
            j = (i + off) % n
            if j not in neigh:
                neigh.append(j)
        ks = np.concatenate([K[j] for j in neigh])
        vs = np.concatenate([V[j] for j in neigh])
        out[i] = _attend(Q[i], ks, vs)
    return out


def global_attention(Q, K, V) -> np.ndarray:
    """Every view's queries attend over all views' keys and values."""
    Q, K, V = _check_qkv(Q, K, V)
    ks = K.reshape(-1, K.shape[-1])
    vs = V.reshape(-1, V.shape[-1])
    return np.stack([_attend(Q[i], ks, vs) for i in range(Q.shape[0])])


@dataclass(eq=False)
class MultiViewBatch:
    """Aligned per-view tensors for one ring of rendered views.

    The stacked per-view input carries the working latent, the encoded
    source view, and the inpainting mask in a fixed channel order, so a
    backend sees (latent C | encoded C | mask 1) = 2C+1 channels.
    """

    views: list[CameraView]
    latents: np.ndarray
    encoded: np.ndarray
    masks: np.ndarray
    codec: object

    def __post_init__(self):
        n = len(self.views)
        if n == 0:
            raise ContractError("batch needs at least one view")
        for arr, name in ((self.latents, "latents"), (self.encoded, "encoded"),
                          (self.masks, "masks")):
            if arr.ndim != 4 or arr.shape[0] != n:
                raise ContractError(f"{name} must be (n_views, h, w, c), got {arr.shape}")
        if self.latents.shape != self.encoded.shape:
            raise ContractError("latents and encoded must share a shape")
        if self.masks.shape[:3] != self.latents.shape[:3] or self.masks.shape[3] != 1:
            raise ContractError("masks must be (n_views, h, w, 1) aligned with latents")
        first = self.views[0].intrinsics
        for v in self.views[1:]:
            i = v.intrinsics
            if (i.fx, i.fy, i.cx, i.cy, i.width, i.height) != (
                    first.fx, first.fy, first.cx, first.cy, first.width, first.height):
                raise ContractError("all views must share intrinsics and image size")

    @property
    def n_views(self) -> int:
        return len(self.views)

    @property
    def latent_channels(self) -> int:
        return self.latents.shape[3]

    def stacked_inputs(self, latents: np.ndarray | None = None) -> np.ndarray:
        """(N, h, w, 2C+1) backend input: latent, encoded, mask."""
        z = self.latents if latents is None else latents
        return np.concatenate([z, self.encoded, self.masks], axis=3)


def make_batch(views: list[CameraView], codec) -> MultiViewBatch:
    """Encode rendered views and pool their facade masks to latent size.

    A latent cell is flagged for inpainting when any pixel of its
    factor x factor block is masked, so no facade pixel escapes.
    """
    if not views:
        raise ContractError("need at least one rendered view")
    first = views[0].intrinsics
    f = codec.factor
    enc, masks = [], []
    for v in views:
        if v.rgb is None or v.lateral_mask is None:
            raise ContractError("views must carry rgb and lateral_mask; rasterize first")
        if (v.intrinsics.width, v.intrinsics.height) != (first.width, first.height):
            raise ContractError("all views must share one image size")
        H, W = v.lateral_mask.shape
        if H % f or W % f:
            raise ContractError(f"view size {W}x{H} not divisible by codec factor {f}")
        enc.append(codec.encode(RasterGrid(np.asarray(v.rgb, dtype=np.float64), gsd=1.0)).data)
        pooled = v.lateral_mask.reshape(H // f, f, W // f, f).any(axis=(1, 3))
        masks.append(pooled.astype(np.float64)[:, :, None])
    encoded = np.stack(enc)
    return MultiViewBatch(list(views), encoded.copy(), encoded, np.stack(masks), codec)


def inpaint_views(batch: MultiViewBatch, backend, table: ViewEmbeddingTable,
                  noise_field: NoiseField, step_list, schedule: NoiseSchedule) -> np.ndarray:
    """Joint deterministic diffusion over all views of the batch.

    All views advance through the timestep ladder in lockstep; before
    each denoising step the known (unmasked) latent cells are re-imposed
    at the current noise level from the encoded inputs, so known content
    survives exactly and only masked cells are synthesized.  The final
    latents are composited once more with the clean encodings, then
    decoded.

    Returns:
        (N, H, W, 3) float64 images.

    Raises:
        ContractError: backend lacks multi-view support.
    """
    if not getattr(backend, "multi_view", False):
        raise ContractError("backend does not declare multi-view support")
    steps = _check_step_list(step_list, schedule.T)
    n, h, w, c = batch.latents.shape
    levels = [level_key(1.0, domain=_DOMAIN_VIEW + v.index) for v in batch.views]

    def ring_noise(t: int) -> np.ndarray:
        return np.stack([
            noise_field.draw_grid(levels[i], t, 0, 0, h, w, c) for i in range(n)
        ])

    m = batch.masks
    known = batch.encoded
    z = ring_noise(steps[0])
    for k in range(len(steps) - 1):
        t, t_prev = steps[k], steps[k + 1]
        z_known = forward_diffuse(known, t, ring_noise(t), schedule)
        z = m * z + (1.0 - m) * z_known
        eps = backend.epsilon_views(z, t, batch, table)
        z = ddim_step(z, eps, t, t_prev, schedule)
    z = m * z + (1.0 - m) * known

    images = [batch.codec.decode(RasterGrid(z[i], gsd=1.0)).data for i in range(n)]
    return np.stack(images)


class ProceduralFacadeBackend:
    """Analysis backend painting facades with world-anchored color.

    The target image for each view keeps the rendered content outside
    the facade mask and fills masked pixels with a smooth trigonometric
    color field evaluated at the pixel's world position (recovered from
    the view's depth buffer).  Two cameras seeing the same wall point
    therefore aim at the same color, which is exactly the cross-view
    consistency the joint loop is meant to preserve.  The epsilon is
    the standard reconstruction against the encoded target; the
    embedding table is accepted for interface parity and unused, since
    pose information already enters through the geometry.
    """

    multi_view = True
    task = "facade"

    def __init__(self, schedule: NoiseSchedule, codec=None, seed: int = 0):
        self.schedule = schedule
        self.codec = codec if codec is not None else BlockCodec()
        rng = np.random.default_rng(np.random.PCG64(seed))
        self._freq = rng.uniform(0.6, 1.7, size=(3, 3)) * rng.choice([-1.0, 1.0], size=(3, 3))
        self._phase = rng.uniform(0.0, 2.0 * np.pi, size=3)
        self._cache = weakref.WeakKeyDictionary()
        self._lock = threading.Lock()

    def facade_color(self, pts: np.ndarray) -> np.ndarray:
        """(..., 3) color of world points, smooth and in [0.05, 0.95]."""
        p = np.asarray(pts, dtype=np.float64)
        chans = [0.5 + 0.45 * np.sin(p @ self._freq[c] + self._phase[c])
                 for c in range(3)]
        return np.stack(chans, axis=-1)

    def _view_target(self, view: CameraView) -> np.ndarray:
        pts = world_points(view)
        finite = np.isfinite(pts).all(axis=-1)
        paint = view.lateral_mask & finite
        target = np.array(view.rgb, dtype=np.float64)
        target[paint] = self.facade_color(pts[paint])
        return target

    def _targets(self, batch: MultiViewBatch) -> np.ndarray:
        with self._lock:
            hit = self._cache.get(batch)
            if hit is not None:
                return hit
        enc = np.stack([
            batch.codec.encode(RasterGrid(self._view_target(v), gsd=1.0)).data
            for v in batch.views
        ])
        with self._lock:
            self._cache[batch] = enc
        return enc

    def epsilon_views(self, z_t: np.ndarray, t: int, batch: MultiViewBatch,
                      table: ViewEmbeddingTable | None = None) -> np.ndarray:
        target = self._targets(batch)
        a = self.schedule.abar(t)
        return (z_t - np.sqrt(a) * target) / np.sqrt(1.0 - a)


register_backend(
    "facade",
    lambda sched, codec=None, **kw: ProceduralFacadeBackend(sched, codec, **kw),
)


def _quantize_unit(img: np.ndarray) -> np.ndarray:
    return np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def save_view_bundle(views: list[CameraView], directory: str | Path,
                     images: np.ndarray | None = None) -> Path:
    """Write per-view rgb/mask/depth PNGs plus cameras.json.

    Depth maps to 16-bit over each view's finite range, with 65535
    reserved for empty pixels; the range lands in the json so loading
    inverts it.  ``images`` overrides the rendered rgb (e.g. inpainted
    results) without touching the views.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    records = []
    for k, v in enumerate(views):
        if v.rgb is None or v.depth is None or v.lateral_mask is None:
            raise ContractError("views must be rasterized before saving")
        rgb = images[k] if images is not None else v.rgb
        stem = f"view_{v.index:03d}"
        Image.fromarray(_quantize_unit(rgb), mode="RGB").save(
            directory / f"{stem}_rgb.png", format="PNG", compress_level=1)
        Image.fromarray(np.where(v.lateral_mask, 255, 0).astype(np.uint8),
                        mode="L").save(
            directory / f"{stem}_mask.png", format="PNG", compress_level=1)
        finite = np.isfinite(v.depth)
        if finite.any():
            dmin = float(v.depth[finite].min())
            dmax = float(v.depth[finite].max())
        else:
            dmin, dmax = 0.0, 1.0
        span = dmax - dmin if dmax > dmin else 1.0
        q = np.full(v.depth.shape, 65535, dtype=np.uint16)
        scaled = (v.depth[finite] - dmin) / span * 65534.0
        q[finite] = np.floor(scaled + 0.5).astype(np.uint16)
        Image.fromarray(q).save(
            directory / f"{stem}_depth.png", format="PNG", compress_level=1)
        intr = v.intrinsics
        records.append({
            "index": v.index,
            "K": [[float(x) for x in row] for row in intr.K],
            "R": [[float(x) for x in row] for row in v.rotation],
            "t": [float(x) for x in v.translation],
            "width": intr.width,
            "height": intr.height,
            "depth_min": dmin,
            "depth_max": dmax,
        })
    (directory / "cameras.json").write_text(
        json.dumps({"views": records}, indent=2, sort_keys=True))
    return directory


def load_view_bundle(directory: str | Path) -> list[CameraView]:
    directory = Path(directory)
    meta = json.loads((directory / "cameras.json").read_text())
    views = []
    for rec in meta["views"]:
        stem = f"view_{rec['index']:03d}"
        with Image.open(directory / f"{stem}_rgb.png") as img:
            rgb = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
        with Image.open(directory / f"{stem}_mask.png") as img:
            mask = np.asarray(img.convert("L")) > 127
        with Image.open(directory / f"{stem}_depth.png") as img:
            q = np.asarray(img, dtype=np.uint16)
        span = rec["depth_max"] - rec["depth_min"]
        if span <= 0:
            span = 1.0
        depth = np.where(
            q == 65535, np.inf,
            q.astype(np.float64) / 65534.0 * span + rec["depth_min"])
        K = np.asarray(rec["K"], dtype=np.float64)
        intr = Intrinsics(K[0, 0], K[1, 1], K[0, 2], K[1, 2],
                          rec["width"], rec["height"])
        views.append(CameraView(
            intr, np.asarray(rec["R"]), np.asarray(rec["t"]), index=rec["index"],
            rgb=rgb, depth=depth, lateral_mask=mask))
    return sorted(views, key=lambda v: v.index)
