"""Private array helpers shared across stages.

The box filters here deliberately avoid running-sum implementations:
each output element is reduced from exactly its kernel support in a
fixed order, so a value computed inside one window crop is bit-identical
to the same value computed inside a different crop.  That property is
what makes overlapping generator windows agree exactly.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = ["box_blur_local", "stack_windows", "luminance"]


def _axis_box_sum(arr: np.ndarray, radius: int, axis: int) -> np.ndarray:
    """Edge-clamped moving sum of width 2*radius+1 along one axis."""
    pad = [(0, 0)] * arr.ndim
    pad[axis] = (radius, radius)
    padded = np.pad(arr, pad, mode="edge")
    win = sliding_window_view(padded, 2 * radius + 1, axis=axis)
    return win.sum(axis=-1, dtype=arr.dtype)


def box_blur_local(arr: np.ndarray, radius: int, axes: tuple[int, int] = (-3, -2)) -> np.ndarray:
    """Separable box mean over a (2r+1)^2 neighborhood, edges clamped.

    radius 0 returns the input unchanged.  The reduction touches only the
    kernel support per output element (see module docstring).
    """
    if radius == 0:
        return arr
    dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else np.dtype(np.float64)
    out = arr.astype(dtype, copy=False)
    k = 2 * radius + 1
    for axis in axes:
        out = _axis_box_sum(out, radius, axis)
    return out * np.asarray(1.0 / (k * k), dtype=dtype)


def stack_windows(band: np.ndarray, origins: np.ndarray, window: int, axis: int = 1) -> np.ndarray:
    """Gather fixed-size windows from a band into a new leading batch axis.

    Args:
        band: (H, W, C) array covering every requested window.
        origins: start offsets along ``axis``.
        window: window length in pixels.

    Returns:
        (len(origins), H, window, C) contiguous array for axis=1.
    """
    views = [np.take(band, np.arange(o, o + window), axis=axis) for o in origins]
    return np.ascontiguousarray(np.stack(views, axis=0))


def luminance(rgb: np.ndarray) -> np.ndarray:
    """Rec. 709 luma of an (..., 3) array, keeping a trailing 1-channel axis."""
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    return (0.2126 * r + 0.7152 * g + 0.0722 * b)[..., None]
