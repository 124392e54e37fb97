"""Back-projection texture baking for wall faces.

Nadir generation only textures what a straight-down camera can see, so
after the ring views have painted the facades this module carries that
imagery back onto the mesh.  Vertical faces are grouped into coplanar
edge-connected strips, each strip gets an axis-aligned rectangle of
texels, and every texel center is projected into the rendered views.
Views that fail a Z-buffer depth test are out of the running; among
the survivors the texel takes a bilinear sample from the view that
sees its surface point most head-on.  Texels no view can see are
filled from their baked neighbors and flagged.

The result stays one mesh with one texture: the output atlas is a
single canvas holding the untouched nadir image in its top rows and
the packed wall charts below it, with every face's UV coordinates
rewritten to match.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .core.camera import CameraView
from .core.mesh import (
    FACE_HORIZONTAL,
    FACE_VERTICAL,
    TexturedMesh,
    classify_faces,
    face_normals,
)
from .core.raster import RasterGrid, bilinear_sample
from .errors import AtlasCapacityError, ContractError, GeometryError

logger = logging.getLogger(__name__)

__all__ = [
    "BakeConfig",
    "Chart",
    "AtlasLayout",
    "TexelRecord",
    "ChartBake",
    "BakeResult",
    "partition_faces",
    "build_charts",
    "pack_atlas",
    "project_point",
    "select_view",
    "bake",
]

# Spacing between packed charts, in texels.  Each chart bleeds its edge
# colors one texel into its side of the gutter so bilinear lookups right
# at a chart border never mix in a neighboring chart.
_GUTTER = 2

_MAX_ATLAS = 1 << 15


def _is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class BakeConfig:
    """Knobs for the baking pass.

    Attributes:
        tau: wall threshold on |normal . z_up|; faces below it count as
            vertical.
        atlas_size: edge length in texels of the square wall region,
            power of two.
        texel_density: texels per meter of wall surface.
        depth_epsilon: visibility slack in meters when comparing a
            texel's depth against the per-view Z buffer.  Defaults to
            half a texel's worth of surface, 0.5 / texel_density.
        min_cosine: smallest normal-to-camera alignment a view may have
            and still be baked from.  The default 0.0 admits arbitrarily
            grazing views and only rules out views that face the back
            of the surface.
    """

    tau: float = 0.3
    atlas_size: int = 512
    texel_density: float = 4.0
    depth_epsilon: float | None = None
    min_cosine: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ContractError(f"tau must lie strictly in (0, 1), got {self.tau}")
        if not isinstance(self.atlas_size, (int, np.integer)) or not _is_power_of_two(
            int(self.atlas_size)
        ):
            raise ContractError(f"atlas_size must be a power of two, got {self.atlas_size}")
        if not (self.texel_density > 0 and np.isfinite(self.texel_density)):
            raise ContractError(f"texel_density must be positive, got {self.texel_density}")
        if self.depth_epsilon is None:
            object.__setattr__(self, "depth_epsilon", 0.5 / self.texel_density)
        if not (self.depth_epsilon > 0):
            raise ContractError(f"depth_epsilon must be positive, got {self.depth_epsilon}")
        if not -1.0 <= self.min_cosine <= 1.0:
            raise ContractError(f"min_cosine must lie in [-1, 1], got {self.min_cosine}")


@dataclass(frozen=True, eq=False)
class Chart:
    """One axis-aligned texel rectangle covering a coplanar face strip.

    The chart's plane frame is (u_axis, v_axis): u_axis is horizontal
    in the world, v_axis runs down the wall, both unit and in-plane.
    Texel (i, j) of the chart has its center at

        origin + (i + 0.5) * texel_size * u_axis
               + (j + 0.5) * texel_size * v_axis

    so ``origin`` is the top-left corner of the rectangle in world
    space.  ``col``/``row`` are the chart's placement inside the square
    wall region of the atlas and stay -1 until packing.
    """

    face_ids: np.ndarray
    normal: np.ndarray
    origin: np.ndarray
    u_axis: np.ndarray
    v_axis: np.ndarray
    texel_size: float
    width: int
    height: int
    col: int = -1
    row: int = -1

    @property
    def area(self) -> int:
        return self.width * self.height


@dataclass(eq=False)
class AtlasLayout:
    """Packed chart placement inside a square wall region."""

    charts: list
    atlas_size: int
    texel_density: float

    def __post_init__(self):
        self._by_face = {}
        for chart in self.charts:
            for f in chart.face_ids:
                self._by_face[int(f)] = chart

    def occupancy(self) -> float:
        """Fraction of the wall region covered by chart interiors."""
        return sum(c.area for c in self.charts) / float(self.atlas_size**2)

    def chart_for_face(self, face_id: int) -> Chart:
        try:
            return self._by_face[int(face_id)]
        except KeyError:
            raise ContractError(f"face {face_id} has no chart") from None


@dataclass(frozen=True, eq=False)
class TexelRecord:
    """Provenance of one wall texel: where it lives, what it covers,
    and which view it was baked from.

    ``status`` is "baked" when some view passed both the depth test and
    the alignment floor, "unseen" otherwise (the texel then holds a
    neighbor-diffused color).  ``source_pixel`` is the continuous (x, y)
    sample position in the chosen view, None when unseen.
    """

    col: int
    row: int
    world_point: np.ndarray
    face_id: int
    normal: np.ndarray
    view_index: int
    source_pixel: tuple[float, float] | None
    status: str


@dataclass(eq=False)
class ChartBake:
    """Dense per-texel bake arrays for one chart.

    All arrays are (height, width, ...) in chart-local texel order.
    ``covered`` marks the rectangle cells whose centers actually lie on
    the face strip; the rectangle may overshoot the strip by a fraction
    of a texel per side, and those slack cells are never baked, only
    filled from their neighbors so edge lookups blend cleanly.
    ``view_index`` is -1 and ``source_px`` is NaN where nothing was
    baked; ``values`` holds the final colors including the
    neighbor-diffusion fill.
    """

    chart: Chart
    world_points: np.ndarray
    face_ids: np.ndarray
    covered: np.ndarray
    view_index: np.ndarray
    alignment: np.ndarray
    source_px: np.ndarray
    baked: np.ndarray
    values: np.ndarray


@dataclass(eq=False)
class BakeResult:
    """Baked mesh plus the chart bookkeeping the exporters consume."""

    mesh: TexturedMesh
    layout: AtlasLayout
    charts: list
    row_offset: int
    unseen_fraction: float
    config: BakeConfig

    def chart_table(self) -> list[dict]:
        """JSON-ready chart list: face ids, atlas rectangle, world frame.

        The rectangle is in absolute atlas pixels of ``mesh.atlas``;
        ``world_basis`` maps atlas pixel (x, y) inside the rectangle to
        the world point origin + (x - col + 0.5) * texel_size * u_axis
        + (y - row + 0.5) * texel_size * v_axis.
        """
        table = []
        for chart in self.layout.charts:
            table.append(
                {
                    "face_ids": [int(f) for f in chart.face_ids],
                    "uv_rect": {
                        "col": int(chart.col),
                        "row": int(self.row_offset + chart.row),
                        "width": int(chart.width),
                        "height": int(chart.height),
                    },
                    "world_basis": {
                        "origin": [float(x) for x in chart.origin],
                        "u_axis": [float(x) for x in chart.u_axis],
                        "v_axis": [float(x) for x in chart.v_axis],
                        "texel_size_m": float(chart.texel_size),
                    },
                }
            )
        return table

    def save_chart_table(self, path) -> Path:
        path = Path(path)
        payload = {
            "atlas_size": self.layout.atlas_size,
            "texel_density": self.layout.texel_density,
            "row_offset": self.row_offset,
            "unseen_fraction": self.unseen_fraction,
            "charts": self.chart_table(),
        }
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        return path

    def record_at(self, col: int, row: int) -> TexelRecord | None:
        """Texel provenance at absolute atlas pixel (col, row).

        Returns None for pixels outside every chart rectangle and for
        rectangle slack cells that cover no surface; both kinds hold
        only gutter or fill colors."""
        for cb in self.charts:
            c = cb.chart
            i = col - c.col
            j = row - self.row_offset - c.row
            if 0 <= i < c.width and 0 <= j < c.height:
                if not cb.covered[j, i]:
                    return None
                baked = bool(cb.baked[j, i])
                src = cb.source_px[j, i]
                return TexelRecord(
                    col=col,
                    row=row,
                    world_point=cb.world_points[j, i].copy(),
                    face_id=int(cb.face_ids[j, i]),
                    normal=c.normal.copy(),
                    view_index=int(cb.view_index[j, i]),
                    source_pixel=(float(src[0]), float(src[1])) if baked else None,
                    status="baked" if baked else "unseen",
                )
        return None


def partition_faces(mesh: TexturedMesh, tau: float = 0.3):
    """Split face indices into (vertical, horizontal) by normal.

    Zero-area faces cannot vote with a normal; they are reported and
    land on the horizontal side, which keeps them out of the chart
    builder.

    Returns:
        (vert_ids, hori_ids): ascending int64 index arrays, disjoint,
        covering every face.
    """
    labels = classify_faces(mesh.vertices, mesh.faces, tau)
    _, degenerate = face_normals(mesh.vertices, mesh.faces)
    n_bad = int(degenerate.sum())
    if n_bad:
        logger.warning(
            "%d degenerate zero-area face(s) classified horizontal by convention", n_bad
        )
    vert = np.flatnonzero(labels == FACE_VERTICAL)
    hori = np.flatnonzero(labels == FACE_HORIZONTAL)
    return vert, hori


def _chart_frame(normal: np.ndarray):
    """In-plane (u_axis, v_axis) for a wall normal: u horizontal in the
    world, v = u x n pointing down the wall (negative z component)."""
    n = np.asarray(normal, dtype=np.float64)
    horiz = np.array([-n[1], n[0], 0.0])
    length = np.linalg.norm(horiz)
    if length < 1e-9:
        raise GeometryError("chart frame undefined for a horizontal surface normal")
    u = horiz / length
    return u, np.cross(u, n)


def _coplanar_groups(mesh: TexturedMesh, face_ids: np.ndarray):
    """Union-find grouping of faces that share an edge and a plane.

    Two faces join the same group when they share two vertex indices
    and their unit normals and plane offsets agree to tight tolerance.
    Groups come back as ascending index arrays, ordered by their
    smallest face id.
    """
    ids = [int(f) for f in face_ids]
    normals, _ = face_normals(mesh.vertices, mesh.faces)
    centroid = mesh.vertices[mesh.faces].mean(axis=1)
    offsets = np.einsum("ij,ij->i", normals, centroid)

    parent = {f: f for f in ids}

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    def union(a, b):
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)

    edge_faces: dict[tuple[int, int], list[int]] = {}
    for f in ids:
        tri = mesh.faces[f]
        for k in range(3):
            a, b = int(tri[k]), int(tri[(k + 1) % 3])
            edge_faces.setdefault((min(a, b), max(a, b)), []).append(f)

    for members in edge_faces.values():
        for i in range(1, len(members)):
            a, b = members[0], members[i]
            same_plane = (
                normals[a] @ normals[b] >= 1.0 - 1e-10
                and abs(offsets[a] - offsets[b]) <= 1e-8 * (1.0 + abs(offsets[a]))
            )
            if same_plane:
                union(a, b)

    groups: dict[int, list[int]] = {}
    for f in ids:
        groups.setdefault(find(f), []).append(f)
    return [np.array(sorted(groups[r]), dtype=np.int64) for r in sorted(groups)]


def build_charts(mesh: TexturedMesh, face_ids, texel_density: float):
    """One chart per coplanar strip of the given faces, unplaced.

    Chart rectangles are the axis-aligned bounds of the strip in its
    plane frame, scaled to texels; a strip spanning 10 m by 3 m at
    4 texels/m becomes a 40 x 12 chart.
    """
    if not (texel_density > 0 and np.isfinite(texel_density)):
        raise ContractError(f"texel_density must be positive, got {texel_density}")
    face_ids = np.asarray(face_ids, dtype=np.int64)
    if face_ids.size == 0:
        return []
    normals, degenerate = face_normals(mesh.vertices, mesh.faces)
    if degenerate[face_ids].any():
        raise GeometryError("cannot build charts over zero-area faces")
    charts = []
    for group in _coplanar_groups(mesh, face_ids):
        n = normals[group].mean(axis=0)
        n = n / np.linalg.norm(n)
        u, v = _chart_frame(n)
        vert_ids = np.unique(mesh.faces[group].ravel())
        verts = mesh.vertices[vert_ids]
        s = verts @ u
        t = verts @ v
        d = float((verts @ n).mean())
        s0, t0 = float(s.min()), float(t.min())
        # ceil with a hair of slack so exact multiples of the texel
        # size do not round up to a spare texel
        width = max(1, int(np.ceil((s.max() - s0) * texel_density - 1e-9)))
        height = max(1, int(np.ceil((t.max() - t0) * texel_density - 1e-9)))
        charts.append(
            Chart(
                face_ids=group,
                normal=n,
                origin=d * n + s0 * u + t0 * v,
                u_axis=u,
                v_axis=v,
                texel_size=1.0 / float(texel_density),
                width=width,
                height=height,
            )
        )
    return charts


def _shelf_pack(charts, atlas_size: int):
    """Shelf positions with _GUTTER spacing, or None when they do not
    fit.  Charts are processed tallest first so each shelf's first
    chart fixes the shelf height."""
    order = sorted(
        range(len(charts)),
        key=lambda i: (-charts[i].height, -charts[i].width, int(charts[i].face_ids[0])),
    )
    pos = [None] * len(charts)
    x = y = shelf_h = 0
    for i in order:
        c = charts[i]
        if c.width > atlas_size or c.height > atlas_size:
            return None
        if x + c.width > atlas_size:
            y += shelf_h + _GUTTER
            x = 0
            shelf_h = 0
        if y + c.height > atlas_size:
            return None
        pos[i] = (x, y)
        x += c.width + _GUTTER
        shelf_h = max(shelf_h, c.height)
    return pos


def pack_atlas(
    mesh: TexturedMesh, face_ids, texel_density: float, atlas_size: int
) -> AtlasLayout:
    """Build charts for the given wall faces and place them.

    Placement is shelf packing with 2-texel gutters; chart interiors
    may claim at most 90% of the region area.  An empty face set is a
    valid empty layout.

    Raises:
        AtlasCapacityError: charts exceed the area budget or cannot be
            shelved; ``required_size`` carries the smallest power-of-two
            edge that would succeed.
    """
    if not _is_power_of_two(int(atlas_size)):
        raise ContractError(f"atlas_size must be a power of two, got {atlas_size}")
    atlas_size = int(atlas_size)
    charts = build_charts(mesh, face_ids, texel_density)
    if not charts:
        return AtlasLayout([], atlas_size, texel_density)
    area = sum(c.area for c in charts)
    pos = None
    if area <= 0.9 * atlas_size**2:
        pos = _shelf_pack(charts, atlas_size)
    if pos is None:
        need = atlas_size
        while True:
            need *= 2
            if need > _MAX_ATLAS:
                raise ContractError(
                    f"charts need an atlas beyond {_MAX_ATLAS} texels; "
                    f"lower the texel density"
                )
            if area <= 0.9 * need**2 and _shelf_pack(charts, need) is not None:
                break
        raise AtlasCapacityError(
            f"{len(charts)} chart(s) with {area} texels do not fit a "
            f"{atlas_size}x{atlas_size} region; {need}x{need} would",
            required_size=need,
        )
    placed = [replace(c, col=p[0], row=p[1]) for c, p in zip(charts, pos)]
    layout = AtlasLayout(placed, atlas_size, texel_density)
    logger.info(
        "packed %d chart(s), occupancy %.1f%%", len(placed), 100.0 * layout.occupancy()
    )
    return layout


def project_point(point, view: CameraView):
    """Pinhole-project one world point into a view.

    Returns:
        (x, y, depth): continuous pixel coordinates and camera-space
        depth in meters.  A non-positive depth means the point is at or
        behind the camera plane and (x, y) carry no meaning; callers
        must treat such points as invisible.
    """
    uv, z = view.project(np.asarray(point, dtype=np.float64).reshape(1, 3))
    return float(uv[0, 0]), float(uv[0, 1]), float(z[0])


def _require_rendered(view: CameraView):
    if view.rgb is None or view.depth is None:
        raise ContractError("view carries no rendered buffers; rasterize it first")


def _view_scores(points, normal, view, depth_epsilon, min_cosine):
    """Eligibility and alignment of one view for many surface points.

    A point is eligible when its projection lands inside the image with
    positive depth, the nearest Z-buffer sample agrees with the
    projected depth to within depth_epsilon, and the view direction
    clears the alignment floor.

    Returns:
        (eligible, align, u, v) arrays over the points.
    """
    uv, z = view.project(points)
    u, v = uv[:, 0], uv[:, 1]
    w, h = view.intrinsics.width, view.intrinsics.height
    with np.errstate(invalid="ignore"):
        inb = (z > 0) & (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)
    eligible = np.zeros(len(points), dtype=bool)
    if inb.any():
        iu = np.rint(u[inb]).astype(np.intp)
        iv = np.rint(v[inb]).astype(np.intp)
        eligible[inb] = z[inb] <= view.depth[iv, iu] + depth_epsilon
    to_cam = view.center - points
    dist = np.linalg.norm(to_cam, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        align = (to_cam @ np.asarray(normal, dtype=np.float64)) / dist
    align = np.where(np.isfinite(align), align, -np.inf)
    eligible &= align >= min_cosine
    return eligible, align, u, v


def select_view(point, normal, views, depth_epsilon: float, min_cosine: float = 0.0) -> int:
    """Index of the view that sees ``point`` most head-on, or -1.

    Eligible views pass three gates: the projection lands in the image
    with positive depth, the Z buffer confirms the point is the front
    surface to within ``depth_epsilon``, and the unit direction from the
    point to the camera aligns with ``normal`` at least ``min_cosine``.
    Among eligible views the highest alignment wins; ties go to the
    lower index.
    """
    if not (depth_epsilon > 0):
        raise ContractError(f"depth_epsilon must be positive, got {depth_epsilon}")
    p = np.asarray(point, dtype=np.float64).reshape(1, 3)
    best, best_align = -1, -np.inf
    for k, view in enumerate(views):
        _require_rendered(view)
        ok, align, _, _ = _view_scores(p, normal, view, depth_epsilon, min_cosine)
        if ok[0] and align[0] > best_align:
            best, best_align = k, float(align[0])
    return best


def _assign_faces(chart: Chart, mesh: TexturedMesh):
    """Owning face and strip coverage for every texel center of a chart.

    Each candidate face scores a texel by its smallest signed distance
    to the face's three edges in plane coordinates (positive inside);
    the most-interior face wins, so texels straddling the shared
    diagonal of a quad land on whichever triangle contains them.

    Returns:
        (owner, covered): (H, W) face ids and a bool mask of texels
        whose centers lie on some face of the strip.  The chart
        rectangle can overshoot the strip by up to a texel per side, so
        ``covered`` is generally a subset of the rectangle.
    """
    ts = chart.texel_size
    s_c = (np.arange(chart.width) + 0.5) * ts
    t_c = (np.arange(chart.height) + 0.5) * ts
    S, T = np.meshgrid(s_c, t_c)
    best = np.full(S.shape, -np.inf)
    owner = np.full(S.shape, int(chart.face_ids[0]), dtype=np.int64)
    for f in chart.face_ids:
        corners = mesh.vertices[mesh.faces[f]] - chart.origin
        ps = corners @ chart.u_axis
        pt = corners @ chart.v_axis
        area2 = (ps[1] - ps[0]) * (pt[2] - pt[0]) - (pt[1] - pt[0]) * (ps[2] - ps[0])
        sign = 1.0 if area2 >= 0 else -1.0
        margin = np.full(S.shape, np.inf)
        for a, b in ((0, 1), (1, 2), (2, 0)):
            ex, ey = ps[b] - ps[a], pt[b] - pt[a]
            length = np.hypot(ex, ey)
            if length < 1e-12:
                continue
            d = sign * (ex * (T - pt[a]) - ey * (S - ps[a])) / length
            margin = np.minimum(margin, d)
        take = margin > best
        best[take] = margin[take]
        owner[take] = int(f)
    return owner, best >= -1e-9


def _fill_unseen(values, seeded):
    """Flood unseen texels layer by layer with the mean of their filled
    4-neighbors.  Texels in a chart with no baked seed at all keep
    their initial color.

    Returns:
        (filled_values, never_filled_mask)
    """
    out = values.copy()
    filled = seeded.copy()
    while not filled.all():
        acc = np.zeros_like(out)
        cnt = np.zeros(out.shape[:2])
        acc[1:] += out[:-1] * filled[:-1, :, None]
        cnt[1:] += filled[:-1]
        acc[:-1] += out[1:] * filled[1:, :, None]
        cnt[:-1] += filled[1:]
        acc[:, 1:] += out[:, :-1] * filled[:, :-1, None]
        cnt[:, 1:] += filled[:, :-1]
        acc[:, :-1] += out[:, 1:] * filled[:, 1:, None]
        cnt[:, :-1] += filled[:, 1:]
        frontier = ~filled & (cnt > 0)
        if not frontier.any():
            break
        out[frontier] = acc[frontier] / cnt[frontier][:, None]
        filled |= frontier
    return out, ~filled


def _bake_chart(chart: Chart, mesh: TexturedMesh, views, config: BakeConfig) -> ChartBake:
    h, w = chart.height, chart.width
    jj, ii = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    ts = chart.texel_size
    points = (
        chart.origin
        + (ii[..., None] + 0.5) * ts * chart.u_axis
        + (jj[..., None] + 0.5) * ts * chart.v_axis
    )
    flat = points.reshape(-1, 3)
    owner, covered = _assign_faces(chart, mesh)
    on_strip = covered.ravel()
    best = np.full(len(flat), -1, dtype=np.int32)
    best_align = np.full(len(flat), -np.inf)
    src = np.full((len(flat), 2), np.nan)
    for k, view in enumerate(views):
        ok, align, u, v = _view_scores(
            flat, chart.normal, view, config.depth_epsilon, config.min_cosine
        )
        take = on_strip & ok & (align > best_align)
        best[take] = k
        best_align[take] = align[take]
        src[take, 0] = u[take]
        src[take, 1] = v[take]
    values = np.full((len(flat), 3), 0.5)
    for k, view in enumerate(views):
        sel = best == k
        if sel.any():
            values[sel] = bilinear_sample(view.rgb, src[sel, 0], src[sel, 1])
    baked = (best >= 0).reshape(h, w)
    filled, _ = _fill_unseen(values.reshape(h, w, 3), baked)
    return ChartBake(
        chart=chart,
        world_points=points,
        face_ids=owner,
        covered=covered,
        view_index=best.reshape(h, w),
        alignment=np.where(baked, best_align.reshape(h, w), np.nan),
        source_px=src.reshape(h, w, 2),
        baked=baked,
        values=filled,
    )


def bake(mesh: TexturedMesh, views, config: BakeConfig | None = None) -> BakeResult:
    """Texture every wall face of ``mesh`` from the rendered ``views``.

    Horizontal faces keep their original texture pixels; their UVs are
    only rescaled into the composite canvas.  Vertical faces get packed
    charts whose texels are baked by most-head-on view selection under
    the Z-buffer visibility test.  An empty view list is allowed and
    leaves every wall texel unseen (flagged and flat-filled).

    Returns:
        BakeResult with the re-textured mesh, the chart layout, dense
        per-chart bake records, and the unseen texel fraction.
    """
    config = config if config is not None else BakeConfig()
    views = list(views)
    for view in views:
        _require_rendered(view)
    vert_ids, _ = partition_faces(mesh, config.tau)
    face_class = np.full(mesh.n_faces, FACE_HORIZONTAL, dtype=np.uint8)
    face_class[vert_ids] = FACE_VERTICAL
    layout = pack_atlas(mesh, vert_ids, config.texel_density, config.atlas_size)
    if not layout.charts:
        logger.info("no vertical faces; texture left as is")
        out = TexturedMesh(
            mesh.vertices.copy(),
            mesh.faces.copy(),
            mesh.uv.copy(),
            RasterGrid(mesh.atlas.data.copy(), mesh.atlas.gsd, mesh.atlas.anchor),
            face_class,
            mesh.face_textured.copy(),
        )
        return BakeResult(out, layout, [], 0, 0.0, config)

    ortho = mesh.atlas
    if ortho.channels not in (1, 3):
        raise ContractError(f"atlas must have 1 or 3 channels, got {ortho.channels}")
    size = config.atlas_size
    row_off = ortho.height + _GUTTER
    canvas_w = max(ortho.width, size)
    canvas_h = row_off + size
    canvas = np.full((canvas_h, canvas_w, 3), 0.5)
    canvas[: ortho.height, : ortho.width] = ortho.data.astype(np.float64)

    # Horizontal UVs shrink onto the nadir block so they keep addressing
    # the very same pixels; wall UVs are rebuilt from the chart frames.
    uv = mesh.uv.copy()
    uv[:, :, 0] *= ortho.width / canvas_w
    uv[:, :, 1] *= ortho.height / canvas_h
    density = layout.texel_density
    for chart in layout.charts:
        for f in chart.face_ids:
            corners = mesh.vertices[mesh.faces[f]] - chart.origin
            s = corners @ chart.u_axis
            t = corners @ chart.v_axis
            uv[f, :, 0] = (chart.col + s * density) / canvas_w
            uv[f, :, 1] = (row_off + chart.row + t * density) / canvas_h

    chart_bakes = []
    n_texels = 0
    n_unseen = 0
    for chart in layout.charts:
        cb = _bake_chart(chart, mesh, views, config)
        chart_bakes.append(cb)
        n_texels += int(cb.covered.sum())
        n_unseen += int((cb.covered & ~cb.baked).sum())
        # write the block with a one-texel edge bleed into the gutters
        padded = np.pad(cb.values, ((1, 1), (1, 1), (0, 0)), mode="edge")
        r0, c0 = row_off + chart.row - 1, chart.col - 1
        rr0, cc0 = max(r0, ortho.height), max(c0, 0)
        rr1 = min(r0 + padded.shape[0], canvas_h)
        cc1 = min(c0 + padded.shape[1], canvas_w)
        canvas[rr0:rr1, cc0:cc1] = padded[rr0 - r0 : rr1 - r0, cc0 - c0 : cc1 - c0]

    unseen_fraction = n_unseen / n_texels if n_texels else 0.0
    if n_unseen:
        logger.info("%d of %d wall texels unseen (%.2f%%)",
                    n_unseen, n_texels, 100.0 * unseen_fraction)
    out = TexturedMesh(
        mesh.vertices.copy(),
        mesh.faces.copy(),
        uv,
        RasterGrid(canvas, ortho.gsd, ortho.anchor),
        face_class,
        np.where(face_class == FACE_VERTICAL, True, mesh.face_textured),
    )
    return BakeResult(out, layout, chart_bakes, row_off, unseen_fraction, config)
