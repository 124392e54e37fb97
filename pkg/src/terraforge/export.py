"""Mesh interchange: Wavefront OBJ and binary glTF writers.

Both formats carry world positions in meters with +Z up, stated in
metadata since glTF viewers conventionally assume +Y up.  OBJ keeps the
welded vertex list and writes the atlas as a PNG sidecar referenced
from a material library; GLB embeds everything in one file, splitting
vertices per face corner because glTF attributes are per vertex.

GLB positions are float32 as the format requires.  To keep the 1e-5 m
round-trip promise at world scale, positions are stored relative to the
bounding-box center and the offset becomes the node translation; a
float32 then only has to resolve coordinates up to half the scene
extent, which is exact to ~8e-6 m at 128 m.  Scenes wider than a few
hundred meters would exceed the tolerance and are reported, not
silently degraded.

The readers exist for round-trip verification and only parse what the
writers emit.
"""

from __future__ import annotations

import io
import json
import logging
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .core.mesh import TexturedMesh
from .core.raster import save_raster_png
from .errors import ContractError

logger = logging.getLogger(__name__)

__all__ = [
    "export_mesh",
    "load_obj_mesh",
    "load_glb_mesh",
    "check_glb_structure",
]

_GLB_MAGIC = 0x46546C67
_CHUNK_JSON = 0x4E4F534A
_CHUNK_BIN = 0x004E4942
_PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


def _fmt(value: float) -> str:
    """Ten significant digits keeps 1e-5 m at kilometer coordinates."""
    return format(float(value), ".10g")


def _atlas_bytes(mesh: TexturedMesh) -> bytes:
    rgb = np.clip(np.asarray(mesh.atlas.data, dtype=np.float64), 0.0, 1.0)
    q = np.floor(rgb * 255.0 + 0.5).astype(np.uint8)
    if q.shape[2] == 1:
        q = np.repeat(q, 3, axis=2)
    buf = io.BytesIO()
    Image.fromarray(q, mode="RGB").save(buf, format="PNG", compress_level=1)
    return buf.getvalue()


def export_mesh(mesh: TexturedMesh, fmt: str, path: str | Path) -> list[Path]:
    """Write a textured mesh; returns the written files, primary first.

    fmt "obj" produces path plus an .mtl and .png sidecar next to it;
    "glb" (alias "gltf-binary") produces a single binary glTF file.

    Raises:
        ContractError: unsupported format string.
    """
    if not isinstance(mesh, TexturedMesh):
        raise ContractError(f"expected a TexturedMesh, got {type(mesh).__name__}")
    name = str(fmt).strip().lower()
    if name == "obj":
        return _write_obj(mesh, Path(path))
    if name in ("glb", "gltf-binary"):
        return _write_glb(mesh, Path(path))
    raise ContractError(f"unsupported export format {fmt!r}; use 'obj' or 'glb'")


# ---------------------------------------------------------------------------
# OBJ


def _write_obj(mesh: TexturedMesh, path: Path) -> list[Path]:
    path.parent.mkdir(parents=True, exist_ok=True)
    mtl_path = path.with_suffix(".mtl")
    png_path = path.with_suffix(".png")
    lines = [
        "# terraforge terrain mesh",
        "# units: meters, up axis: +Z",
        f"mtllib {mtl_path.name}",
        "o terrain",
    ]
    for v in mesh.vertices:
        lines.append(f"v {_fmt(v[0])} {_fmt(v[1])} {_fmt(v[2])}")
    # OBJ texture space has v growing upward; atlas rows grow downward
    for corners in mesh.uv:
        for u, vv in corners:
            lines.append(f"vt {_fmt(u)} {_fmt(1.0 - vv)}")
    lines.append("usemtl atlas")
    for fi, face in enumerate(mesh.faces):
        t = 3 * fi
        lines.append(
            f"f {face[0] + 1}/{t + 1} {face[1] + 1}/{t + 2} {face[2] + 1}/{t + 3}")
    path.write_text("\n".join(lines) + "\n")
    mtl_path.write_text(
        "newmtl atlas\nKa 1 1 1\nKd 1 1 1\nKs 0 0 0\n"
        f"map_Kd {png_path.name}\n")
    save_raster_png(mesh.atlas, png_path)
    logger.debug("wrote OBJ %s (%d vertices, %d faces)", path,
                 mesh.n_vertices, mesh.n_faces)
    return [path, mtl_path, png_path]


def load_obj_mesh(path: str | Path) -> dict:
    """Parse an OBJ written by :func:`export_mesh`.

    Returns vertices (V, 3), faces (F, 3) zero-based, and per-corner
    uv (F, 3, 2) with the vertical flip undone.
    """
    vertices, texcoords, faces, face_uv_ids = [], [], [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            vertices.append([float(x) for x in parts[1:4]])
        elif parts[0] == "vt":
            texcoords.append([float(parts[1]), float(parts[2])])
        elif parts[0] == "f":
            ids = [p.split("/") for p in parts[1:4]]
            faces.append([int(i[0]) - 1 for i in ids])
            face_uv_ids.append([int(i[1]) - 1 for i in ids])
    vt = np.asarray(texcoords, dtype=np.float64)
    uv = vt[np.asarray(face_uv_ids)] if texcoords else np.zeros((0, 3, 2))
    uv[..., 1] = 1.0 - uv[..., 1]
    return {
        "vertices": np.asarray(vertices, dtype=np.float64),
        "faces": np.asarray(faces, dtype=np.int64),
        "uv": uv,
    }


# ---------------------------------------------------------------------------
# binary glTF


def _pad(data: bytes, fill: bytes) -> bytes:
    return data + fill * (-len(data) % 4)


def _write_glb(mesh: TexturedMesh, path: Path) -> list[Path]:
    path.parent.mkdir(parents=True, exist_ok=True)
    corners = mesh.vertices[mesh.faces].reshape(-1, 3)
    center = (mesh.vertices.min(axis=0) + mesh.vertices.max(axis=0)) / 2.0
    positions = (corners - center).astype(np.float32)
    half_extent = float(np.abs(positions).max()) if positions.size else 0.0
    worst = half_extent * 2.0 ** -24
    if worst > 1e-5:
        logger.warning(
            "glTF float32 precision at half extent %.1f m is %.2e m, beyond "
            "the 1e-5 round-trip budget", half_extent, worst)
    uv = mesh.uv.reshape(-1, 2).astype(np.float32)
    indices = np.arange(len(positions), dtype=np.uint32)
    png = _atlas_bytes(mesh)

    blobs = [positions.tobytes(), uv.tobytes(), indices.tobytes(), png]
    views, offset = [], 0
    for blob in blobs:
        views.append({"buffer": 0, "byteOffset": offset, "byteLength": len(blob)})
        offset += len(blob) + (-len(blob) % 4)
    binary = b"".join(_pad(b, b"\x00") for b in blobs)

    gltf = {
        "asset": {
            "version": "2.0",
            "generator": "terraforge",
            "extras": {"units": "meters", "up_axis": "+Z"},
        },
        "scene": 0,
        "scenes": [{"nodes": [0]}],
        "nodes": [{"mesh": 0, "translation": [float(c) for c in center]}],
        "meshes": [{
            "primitives": [{
                "attributes": {"POSITION": 0, "TEXCOORD_0": 1},
                "indices": 2,
                "material": 0,
                "mode": 4,
            }],
        }],
        "materials": [{
            "pbrMetallicRoughness": {
                "baseColorTexture": {"index": 0},
                "metallicFactor": 0.0,
                "roughnessFactor": 1.0,
            },
            "doubleSided": True,
        }],
        "textures": [{"source": 0, "sampler": 0}],
        "samplers": [{"magFilter": 9729, "minFilter": 9729,
                      "wrapS": 33071, "wrapT": 33071}],
        "images": [{"bufferView": 3, "mimeType": "image/png"}],
        "buffers": [{"byteLength": len(binary)}],
        "bufferViews": views,
        "accessors": [
            {
                "bufferView": 0, "componentType": 5126, "count": len(positions),
                "type": "VEC3",
                "min": [float(v) for v in positions.min(axis=0)] if len(positions) else [0, 0, 0],
                "max": [float(v) for v in positions.max(axis=0)] if len(positions) else [0, 0, 0],
            },
            {"bufferView": 1, "componentType": 5126, "count": len(uv),
             "type": "VEC2"},
            {"bufferView": 2, "componentType": 5125, "count": len(indices),
             "type": "SCALAR"},
        ],
    }
    payload = _pad(json.dumps(gltf, sort_keys=True,
                              separators=(",", ":")).encode("utf-8"), b" ")
    total = 12 + 8 + len(payload) + 8 + len(binary)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<III", _GLB_MAGIC, 2, total))
        fh.write(struct.pack("<II", len(payload), _CHUNK_JSON))
        fh.write(payload)
        fh.write(struct.pack("<II", len(binary), _CHUNK_BIN))
        fh.write(binary)
    logger.debug("wrote GLB %s (%d corners)", path, len(positions))
    return [path]


def _read_glb(path: str | Path) -> tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    magic, version, length = struct.unpack_from("<III", raw, 0)
    if magic != _GLB_MAGIC:
        raise ContractError(f"{path} is not a binary glTF file")
    if version != 2 or length != len(raw):
        raise ContractError(f"{path} has a malformed glTF header")
    json_len, json_type = struct.unpack_from("<II", raw, 12)
    if json_type != _CHUNK_JSON:
        raise ContractError("first GLB chunk must be JSON")
    gltf = json.loads(raw[20:20 + json_len])
    bin_off = 20 + json_len
    bin_len, bin_type = struct.unpack_from("<II", raw, bin_off)
    if bin_type != _CHUNK_BIN:
        raise ContractError("second GLB chunk must be BIN")
    binary = raw[bin_off + 8:bin_off + 8 + bin_len]
    return gltf, binary


def _accessor_array(gltf: dict, binary: bytes, index: int) -> np.ndarray:
    acc = gltf["accessors"][index]
    view = gltf["bufferViews"][acc["bufferView"]]
    dtype = {5126: np.float32, 5125: np.uint32}[acc["componentType"]]
    width = {"SCALAR": 1, "VEC2": 2, "VEC3": 3}[acc["type"]]
    start = view.get("byteOffset", 0) + acc.get("byteOffset", 0)
    count = acc["count"] * width
    arr = np.frombuffer(binary, dtype=dtype, count=count, offset=start)
    return arr.reshape(acc["count"], width) if width > 1 else arr


def load_glb_mesh(path: str | Path) -> dict:
    """Read back a GLB written by :func:`export_mesh`.

    The returned "corners" are absolute world positions (float64 sum of
    the float32 attribute and the node translation), one row per face
    corner in face order.
    """
    gltf, binary = _read_glb(path)
    prim = gltf["meshes"][0]["primitives"][0]
    positions = _accessor_array(gltf, binary, prim["attributes"]["POSITION"])
    uv = _accessor_array(gltf, binary, prim["attributes"]["TEXCOORD_0"])
    indices = _accessor_array(gltf, binary, prim["indices"])
    translation = np.asarray(gltf["nodes"][0].get("translation", [0, 0, 0]),
                             dtype=np.float64)
    img_view = gltf["bufferViews"][gltf["images"][0]["bufferView"]]
    start = img_view.get("byteOffset", 0)
    png = binary[start:start + img_view["byteLength"]]
    atlas = np.asarray(Image.open(io.BytesIO(png)), dtype=np.float64) / 255.0
    return {
        "corners": positions.astype(np.float64) + translation,
        "uv": uv.astype(np.float64),
        "indices": np.asarray(indices, dtype=np.int64),
        "translation": translation,
        "atlas": atlas,
        "json": gltf,
    }


def check_glb_structure(path: str | Path) -> list[str]:
    """Structural validation of a GLB file; empty list means clean.

    Covers the container framing and the cross-references a strict
    loader would reject: header magic/version/length, chunk order,
    buffer-view bounds, accessor extents, POSITION min/max truthfulness,
    and the embedded image signature.
    """
    problems: list[str] = []
    try:
        gltf, binary = _read_glb(path)
    except ContractError as err:
        return [str(err)]
    if gltf.get("asset", {}).get("version") != "2.0":
        problems.append("asset.version is not 2.0")
    for key in ("scenes", "nodes", "meshes", "accessors", "bufferViews", "buffers"):
        if not gltf.get(key):
            problems.append(f"missing top-level {key}")
    if problems:
        return problems
    declared = gltf["buffers"][0].get("byteLength", -1)
    if declared != len(binary):
        problems.append(
            f"buffer byteLength {declared} != BIN chunk size {len(binary)}")
    item_size = {5126: 4, 5125: 4, 5123: 2}
    width = {"SCALAR": 1, "VEC2": 2, "VEC3": 3, "VEC4": 4}
    for i, view in enumerate(gltf["bufferViews"]):
        if view.get("byteOffset", 0) + view["byteLength"] > len(binary):
            problems.append(f"bufferView {i} overruns the binary chunk")
    for i, acc in enumerate(gltf["accessors"]):
        view = gltf["bufferViews"][acc["bufferView"]]
        need = acc["count"] * width[acc["type"]] * item_size[acc["componentType"]]
        if need + acc.get("byteOffset", 0) > view["byteLength"]:
            problems.append(f"accessor {i} overruns bufferView {acc['bufferView']}")
    prim = gltf["meshes"][0]["primitives"][0]
    pos_id = prim["attributes"].get("POSITION")
    if pos_id is None:
        problems.append("primitive lacks POSITION")
    else:
        acc = gltf["accessors"][pos_id]
        if "min" not in acc or "max" not in acc:
            problems.append("POSITION accessor lacks min/max")
        elif acc["count"]:
            data = _accessor_array(gltf, binary, pos_id)
            if (not np.allclose(acc["min"], data.min(axis=0), atol=1e-6)
                    or not np.allclose(acc["max"], data.max(axis=0), atol=1e-6)):
                problems.append("POSITION min/max do not match the data")
    idx_id = prim.get("indices")
    if idx_id is not None and gltf["accessors"][idx_id]["count"] % 3:
        problems.append("triangle index count is not a multiple of 3")
    for i, image in enumerate(gltf.get("images", [])):
        view = gltf["bufferViews"][image["bufferView"]]
        start = view.get("byteOffset", 0)
        if image.get("mimeType") == "image/png" and \
                binary[start:start + 8] != _PNG_SIGNATURE:
            problems.append(f"image {i} does not start with a PNG signature")
    return problems
