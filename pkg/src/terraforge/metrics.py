"""Evaluation suite for generated scenes.

Four families of measurements live here.  Distribution distance between
feature sets (fid) scores how closely generated imagery matches a
reference corpus.  Seam continuity (msg) averages the absolute pixel
difference across the stitch lines of a window plan, the quantity the
tiler is built to suppress.  View agreement (psnr, ssim, and the
re-render protocol in reprojection_consistency) scores how faithfully
baked textures survive a round trip through the mesh.  Text scores
(accuracy, rouge_l) grade question answering and captions.

Deep-feature extraction is deliberately an input, not an operation:
feature vectors arrive from files or from the bundled handcrafted
``image_descriptor``, whose scores are self-consistent but not
comparable to published numbers from pretrained networks.

Every operation is a pure function of its arguments and reduces with
numpy's fixed-order summation, so repeated calls are bit-identical and
callers may parallelize over image pairs freely.
"""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .bake import BakeConfig, bake
from .core.camera import CameraView
from .core.mesh import TexturedMesh
from .core.raster import RasterGrid
from .errors import ContractError, MetricError
from .multiview import rasterize
from .tiler import WindowPlan

logger = logging.getLogger(__name__)

__all__ = [
    "FeatureSet",
    "SeamSpec",
    "DESCRIPTOR_WIDTH",
    "fid",
    "msg",
    "psnr",
    "ssim",
    "reprojection_consistency",
    "accuracy",
    "rouge_l",
    "image_descriptor",
    "describe_images",
    "save_features",
    "load_features",
]

# Eigenvalues of a nominally PSD matrix may dip below zero through
# rounding; dips past this magnitude mean the input was not a
# covariance matrix and are an error rather than noise.
_EIG_FLOOR = -1e-6


# ---------------------------------------------------------------------------
# feature sets and distribution distance


@dataclass(frozen=True)
class FeatureSet:
    """First two moments of a collection of feature vectors.

    Attributes:
        mean: (D,) per-dimension mean.
        cov: (D, D) covariance, symmetric within 1e-9.
        n: number of vectors the moments summarize, at least 2.
    """

    mean: np.ndarray
    cov: np.ndarray
    n: int

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        cov = np.asarray(self.cov, dtype=np.float64)
        if mean.ndim != 1 or mean.size == 0:
            raise ContractError(f"mean must be a non-empty vector, got shape {mean.shape}")
        if cov.shape != (mean.size, mean.size):
            raise ContractError(
                f"covariance shape {cov.shape} does not match width {mean.size}")
        if int(self.n) < 2:
            raise ContractError(f"a feature set needs at least 2 vectors, got {self.n}")
        if not np.all(np.abs(cov - cov.T) <= 1e-9):
            raise ContractError("covariance is not symmetric within 1e-9")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "n", int(self.n))

    @property
    def width(self) -> int:
        return self.mean.size

    @classmethod
    def from_features(cls, rows: np.ndarray) -> "FeatureSet":
        """Summarize an (n, D) array of feature vectors, n >= 2.

        Covariance uses the unbiased n-1 normalization.
        """
        rows = np.asarray(rows, dtype=np.float64)
        if rows.ndim != 2:
            raise ContractError(f"expected an (n, D) array, got shape {rows.shape}")
        if rows.shape[0] < 2:
            raise ContractError(f"need at least 2 feature vectors, got {rows.shape[0]}")
        cov = np.atleast_2d(np.cov(rows, rowvar=False))
        return cls(rows.mean(axis=0), cov, rows.shape[0])


def _psd_eigh(mat: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecompose a symmetric PSD matrix, clamping rounding dips."""
    values, vectors = np.linalg.eigh(mat)
    low = float(values.min())
    if low < _EIG_FLOOR:
        raise MetricError(f"{what} is not positive semi-definite "
                          f"(eigenvalue {low:.3e} below {_EIG_FLOOR:.0e})")
    if low < 0.0:
        logger.debug("clamping %d slightly negative eigenvalue(s) of %s",
                     int((values < 0.0).sum()), what)
        values = np.clip(values, 0.0, None)
    return values, vectors


def fid(set_r: FeatureSet, set_g: FeatureSet) -> float:
    """Squared distribution distance between two Gaussian feature summaries.

    Returns ``|mu_r - mu_g|^2 + tr(S_r + S_g - 2 (S_r S_g)^{1/2})``.
    The matrix square root is taken through the symmetric equivalent
    ``sqrtm(S_r^{1/2} S_g S_r^{1/2})``, whose trace matches that of
    ``(S_r S_g)^{1/2}`` but whose eigendecomposition is numerically
    well behaved.  Eigenvalues below -1e-6 raise; smaller dips are
    clamped to zero.

    Raises:
        MetricError: width mismatch or covariance not PSD within tolerance.
    """
    if set_r.width != set_g.width:
        raise MetricError(
            f"feature widths differ: {set_r.width} vs {set_g.width}")
    values_r, vectors_r = _psd_eigh(set_r.cov, "reference covariance")
    root_r = (vectors_r * np.sqrt(values_r)) @ vectors_r.T
    inner = root_r @ set_g.cov @ root_r
    inner = (inner + inner.T) / 2.0
    cross, _ = _psd_eigh(inner, "covariance product")
    delta = set_r.mean - set_g.mean
    return float(delta @ delta + np.trace(set_r.cov) + np.trace(set_g.cov)
                 - 2.0 * np.sqrt(cross).sum())


# ---------------------------------------------------------------------------
# seam continuity


@dataclass(frozen=True)
class SeamSpec:
    """Stitch-line coordinates of a merged raster.

    A vertical seam at column c separates columns c-1 and c; the
    across-seam difference for row r is ``x[r, c] - x[r, c-1]``.
    Horizontal seams at row r pair rows r-1 and r the same way.

    Attributes:
        columns: x coordinates of vertical seams, each >= 1.
        rows: y coordinates of horizontal seams, each >= 1.
    """

    columns: tuple[int, ...]
    rows: tuple[int, ...]

    def __post_init__(self):
        cols = tuple(int(c) for c in self.columns)
        rws = tuple(int(r) for r in self.rows)
        if any(c < 1 for c in cols) or any(r < 1 for r in rws):
            raise ContractError("seam coordinates must be >= 1 so both "
                                "sides of the seam exist")
        object.__setattr__(self, "columns", cols)
        object.__setattr__(self, "rows", rws)

    @classmethod
    def from_plan(cls, plan: WindowPlan) -> "SeamSpec":
        """Seams at the ownership boundaries of a window plan."""
        return cls(plan.seam_columns(), plan.seam_rows())


def msg(raster: RasterGrid | np.ndarray, seams: SeamSpec) -> float:
    """Mean absolute across-seam pixel difference.

    Each seam pixel contributes the absolute finite difference between
    the two pixels straddling the stitch line, averaged over channels;
    the metric is the mean over every seam pixel of every seam.

    Raises:
        MetricError: empty seam set, or a seam outside the raster.
    """
    data = raster.data if isinstance(raster, RasterGrid) else np.asarray(raster)
    data = np.asarray(data, dtype=np.float64)
    if data.ndim == 2:
        data = data[:, :, None]
    if data.ndim != 3:
        raise ContractError(f"expected a 2-D or 3-D raster, got shape {data.shape}")
    height, width = data.shape[:2]
    if not seams.columns and not seams.rows:
        raise MetricError("seam set is empty; the metric is undefined")
    if any(c >= width for c in seams.columns) or any(r >= height for r in seams.rows):
        raise MetricError(f"seam outside the {width}x{height} raster")
    diffs = []
    for c in seams.columns:
        diffs.append(np.abs(data[:, c] - data[:, c - 1]).mean(axis=1))
    for r in seams.rows:
        diffs.append(np.abs(data[r, :] - data[r - 1, :]).mean(axis=1))
    return float(np.concatenate(diffs).mean())


# ---------------------------------------------------------------------------
# pixel and structural view agreement


def psnr(a: np.ndarray, b: np.ndarray, max_intensity: float = 1.0,
         mask: np.ndarray | None = None) -> float:
    """Peak signal-to-noise ratio in dB, ``10 log10(max^2 / MSE)``.

    The mean squared error runs over every scalar element under
    comparison (pixels times channels).  With a mask, only pixels where
    the mask is True participate; the mask matches the leading axes of
    the images, so one (H, W) mask covers all channels.

    Returns +inf when the restriction of a and b is identical.

    Raises:
        MetricError: shape mismatch or a mask selecting no pixels.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch: {a.shape} vs {b.shape}")
    if not max_intensity > 0.0:
        raise ContractError(f"max_intensity must be positive, got {max_intensity}")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != a.shape[:mask.ndim]:
            raise MetricError(
                f"mask shape {mask.shape} does not match image shape {a.shape}")
        if not mask.any():
            raise MetricError("mask selects no pixels; the metric is undefined")
        a = a[mask]
        b = b[mask]
    mse = float(np.square(a - b).mean())
    if mse == 0.0:
        return float("inf")
    return 10.0 * math.log10(float(max_intensity) ** 2 / mse)


def _window_mean(img: np.ndarray, window: int) -> np.ndarray:
    """Uniform stride-1 window mean of a 2-D array."""
    return sliding_window_view(img, (window, window)).mean(axis=(-1, -2))


def _ssim_map(a: np.ndarray, b: np.ndarray, c1: float, c2: float,
              window: int) -> np.ndarray:
    mu_a = _window_mean(a, window)
    mu_b = _window_mean(b, window)
    var_a = _window_mean(a * a, window) - mu_a * mu_a
    var_b = _window_mean(b * b, window) - mu_b * mu_b
    cov = _window_mean(a * b, window) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a: np.ndarray, b: np.ndarray, max_intensity: float = 1.0,
         window: int = 8, mask: np.ndarray | None = None) -> float:
    """Mean structural similarity over uniform stride-1 windows.

    Per window the score is
    ``(2 mu_a mu_b + C1)(2 cov + C2) / ((mu_a^2 + mu_b^2 + C1)(var_a + var_b + C2))``
    with ``C1 = (0.01 max)^2`` and ``C2 = (0.03 max)^2``; the default
    window is 8x8 with uniform weights.  Multi-channel images score
    each channel independently and average.  With a mask, only windows
    lying entirely inside the mask participate, so the statistics never
    mix masked and unmasked pixels.

    Raises:
        MetricError: shape mismatch, raster smaller than the window,
            values outside [0, max_intensity], or a mask without a
            single fully covered window.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch: {a.shape} vs {b.shape}")
    if not max_intensity > 0.0:
        raise ContractError(f"max_intensity must be positive, got {max_intensity}")
    if window < 2:
        raise ContractError(f"window must be at least 2, got {window}")
    if a.ndim == 2:
        a = a[:, :, None]
        b = b[:, :, None]
    if a.ndim != 3:
        raise ContractError(f"expected 2-D or 3-D images, got shape {a.shape}")
    height, width = a.shape[:2]
    if height < window or width < window:
        raise MetricError(
            f"{width}x{height} raster is smaller than the {window}-pixel window")
    slack = 1e-6 * float(max_intensity)
    for name, img in (("first", a), ("second", b)):
        if img.min() < -slack or img.max() > max_intensity + slack:
            raise MetricError(f"{name} image leaves [0, {max_intensity}]: "
                              f"range [{img.min():.6g}, {img.max():.6g}]")
    keep = None
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (height, width):
            raise MetricError(
                f"mask shape {mask.shape} does not match image shape {a.shape[:2]}")
        counts = sliding_window_view(mask, (window, window)).sum(axis=(-1, -2))
        keep = counts == window * window
        if not keep.any():
            raise MetricError("mask contains no fully covered window; "
                              "the metric is undefined")
    c1 = (0.01 * float(max_intensity)) ** 2
    c2 = (0.03 * float(max_intensity)) ** 2
    scores = []
    for c in range(a.shape[2]):
        smap = _ssim_map(a[:, :, c], b[:, :, c], c1, c2, window)
        scores.append(smap[keep] if keep is not None else smap.ravel())
    return float(np.concatenate(scores).mean())


def reprojection_consistency(views: Sequence[CameraView], mesh: TexturedMesh,
                             config: BakeConfig | None = None,
                             max_intensity: float = 1.0) -> dict:
    """Score how consistently a view ring textures the mesh.

    The views are baked onto the mesh, the textured mesh is re-rendered
    from each view's own pose, and the re-render is compared with the
    original image.  Comparison pixels are the facade pixels both
    renders agree on (the original lateral mask intersected with the
    re-render's); a view whose mask admits no full ssim window
    propagates that error.

    Returns:
        ``{"psnr": mean dB, "ssim": mean, "per_view": [...]}`` where
        each per-view entry carries the view index, its two scores, and
        the number of comparison pixels.
    """
    if not views:
        raise MetricError("no views to compare")
    for view in views:
        if view.rgb is None or view.depth is None or view.lateral_mask is None:
            raise ContractError(
                f"view {view.index} is missing rgb, depth, or lateral mask")
    result = bake(mesh, list(views), config or BakeConfig())
    per_view = []
    for view in views:
        rendered = rasterize(result.mesh, view)
        overlap = view.lateral_mask & rendered.lateral_mask
        if not overlap.any():
            raise MetricError(f"view {view.index} sees no facade pixels")
        per_view.append({
            "view": int(view.index),
            "psnr": psnr(view.rgb, rendered.rgb, max_intensity, mask=overlap),
            "ssim": ssim(view.rgb, rendered.rgb, max_intensity, mask=overlap),
            "pixels": int(overlap.sum()),
        })
    return {
        "psnr": float(np.mean([entry["psnr"] for entry in per_view])),
        "ssim": float(np.mean([entry["ssim"] for entry in per_view])),
        "per_view": per_view,
    }


# ---------------------------------------------------------------------------
# reasoning scores


def _fold_answer(answer) -> str:
    """Case and whitespace normalization for answer comparison."""
    return " ".join(str(answer).split()).lower()


def _answers_match(predicted, label) -> bool:
    a, b = _fold_answer(predicted), _fold_answer(label)
    if a == b:
        return True
    try:
        return float(a) == float(b)
    except ValueError:
        return False


def accuracy(predictions: Sequence, labels: Sequence) -> float:
    """Fraction of predictions matching their labels.

    Answers are compared after case folding and whitespace collapsing;
    answers that parse as numbers compare numerically, so "3" and "3.0"
    agree.

    Raises:
        MetricError: length mismatch or empty inputs.
    """
    if len(predictions) != len(labels):
        raise MetricError(
            f"{len(predictions)} predictions vs {len(labels)} labels")
    if not labels:
        raise MetricError("no answers to score")
    hits = sum(_answers_match(p, y) for p, y in zip(predictions, labels))
    return hits / len(labels)


def _tokenize(text: str) -> list[str]:
    """Lowercase split on whitespace and punctuation."""
    return re.findall(r"[0-9a-z]+", text.lower())


def _as_tokens(value) -> list[str]:
    if isinstance(value, str):
        return _tokenize(value)
    return [str(tok).lower() for tok in value]


def _lcs_length(xs: Sequence[str], ys: Sequence[str]) -> int:
    """Longest common subsequence length by dynamic programming."""
    prev = [0] * (len(ys) + 1)
    for x in xs:
        cur = [0] * (len(ys) + 1)
        for j, y in enumerate(ys, start=1):
            if x == y:
                cur[j] = prev[j - 1] + 1
            else:
                cur[j] = max(cur[j - 1], prev[j])
        prev = cur
    return prev[-1]


def rouge_l(reference, candidate, beta: float = 1.0) -> dict:
    """Longest-common-subsequence recall, precision, and F score.

    Inputs may be strings (tokenized by lowercasing and splitting on
    whitespace and punctuation) or pre-tokenized sequences.  With
    reference length m, candidate length n, and L the LCS length,
    recall is L/m, precision L/n, and
    ``F = (1 + beta^2) R P / (R + beta^2 P)``, defined as 0 when both
    R and P are 0.

    Raises:
        MetricError: empty reference or candidate after tokenization.
    """
    ref = _as_tokens(reference)
    cand = _as_tokens(candidate)
    if not ref or not cand:
        raise MetricError("reference and candidate must both be non-empty")
    lcs = _lcs_length(ref, cand)
    recall = lcs / len(ref)
    precision = lcs / len(cand)
    if recall == 0.0 and precision == 0.0:
        f_score = 0.0
    else:
        b2 = float(beta) ** 2
        f_score = (1.0 + b2) * recall * precision / (recall + b2 * precision)
    return {"recall": recall, "precision": precision, "f": f_score}


# ---------------------------------------------------------------------------
# handcrafted image features and feature files

DESCRIPTOR_WIDTH = 64

_VALUE_BINS = 8
_GRAD_BINS = 8
_ORIENT_BINS = 16


def image_descriptor(image: np.ndarray) -> np.ndarray:
    """64-wide appearance descriptor of an (H, W, 3) image in [0, 1].

    Concatenates, in order: an 8-bin intensity histogram per channel
    (24), an 8-bin gradient-magnitude histogram per channel (24), and a
    16-bin gradient-orientation histogram of the luma weighted by
    magnitude (16).  Histogram blocks are normalized to unit sum (the
    orientation block of a flat image stays zero).  Scores built on
    this descriptor are self-consistent but not comparable to numbers
    from pretrained feature extractors.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ContractError(f"expected an (H, W, 3) image, got shape {image.shape}")
    if image.shape[0] < 2 or image.shape[1] < 2:
        raise ContractError("image must be at least 2x2 for gradients")
    if not np.isfinite(image).all():
        raise ContractError("image contains non-finite values")
    pixels = image.shape[0] * image.shape[1]
    parts = []
    for c in range(3):
        counts, _ = np.histogram(image[:, :, c], bins=_VALUE_BINS, range=(0.0, 1.0))
        parts.append(counts / pixels)
    grad_ceiling = math.sqrt(2.0)
    for c in range(3):
        gy, gx = np.gradient(image[:, :, c])
        magnitude = np.hypot(gx, gy)
        counts, _ = np.histogram(magnitude, bins=_GRAD_BINS, range=(0.0, grad_ceiling))
        parts.append(counts / pixels)
    luma = (0.2126 * image[:, :, 0] + 0.7152 * image[:, :, 1]
            + 0.0722 * image[:, :, 2])
    gy, gx = np.gradient(luma)
    magnitude = np.hypot(gx, gy)
    angle = np.arctan2(gy, gx)
    weights, _ = np.histogram(angle, bins=_ORIENT_BINS, range=(-math.pi, math.pi),
                              weights=magnitude)
    total = magnitude.sum()
    parts.append(weights / total if total > 0.0 else weights)
    descriptor = np.concatenate(parts)
    assert descriptor.size == DESCRIPTOR_WIDTH
    return descriptor


def describe_images(images: Iterable[np.ndarray]) -> np.ndarray:
    """Stack image descriptors into an (n, 64) feature array."""
    rows = [image_descriptor(img) for img in images]
    if not rows:
        raise ContractError("no images to describe")
    return np.stack(rows, axis=0)


def _header_path(path: Path) -> Path:
    return path.with_suffix(path.suffix + ".json")


def save_features(path: str | Path, rows: np.ndarray) -> None:
    """Write feature vectors as raw float32 rows plus a JSON header.

    The binary file holds the row-major (n, D) matrix; the header file
    (same name with .json appended) records {"n": ..., "D": ...}.
    """
    rows = np.asarray(rows, dtype=np.float32)
    if rows.ndim != 2 or rows.shape[0] < 1 or rows.shape[1] < 1:
        raise ContractError(f"expected a non-empty (n, D) array, got shape {rows.shape}")
    path = Path(path)
    path.write_bytes(np.ascontiguousarray(rows).tobytes())
    header = {"n": int(rows.shape[0]), "D": int(rows.shape[1])}
    _header_path(path).write_text(json.dumps(header, sort_keys=True) + "\n")


def load_features(path: str | Path) -> np.ndarray:
    """Read an (n, D) float32 feature matrix written by save_features."""
    path = Path(path)
    header = json.loads(_header_path(path).read_text())
    n, width = int(header["n"]), int(header["D"])
    raw = path.read_bytes()
    expected = n * width * 4
    if len(raw) != expected:
        raise ContractError(
            f"feature file {path} holds {len(raw)} bytes, header implies {expected}")
    return np.frombuffer(raw, dtype=np.float32).reshape(n, width).copy()
