"""Scale conditioning embeddings.

Generators working across a resolution ladder receive the target ground
sample distance as a small sinusoidal code over ln(s), so nearby scales
get nearby codes and the spacing is geometric rather than linear.
"""

from __future__ import annotations

import numpy as np

from ..errors import ContractError

__all__ = ["resolution_embedding"]


def resolution_embedding(s: float, dim: int = 16) -> np.ndarray:
    """Sinusoidal embedding of a ground sample distance.

    Entry pairs are sin(ln(s) / w_j), cos(ln(s) / w_j) for geometric
    periods w_j = 100 ** (2 j / dim), j = 0 .. dim/2 - 1, interleaved as
    [sin_0, cos_0, sin_1, cos_1, ...].  For dim=4 this gives w = (1, 10).

    Args:
        s: ground sample distance in meters per pixel, must be > 0.
        dim: even embedding width >= 2.

    Returns:
        (dim,) float64 vector.

    Raises:
        ContractError: non-positive s or odd/too-small dim.
    """
    if not s > 0 or not np.isfinite(s):
        raise ContractError(f"gsd must be positive and finite, got {s}")
    if dim < 2 or dim % 2 != 0:
        raise ContractError(f"embedding dim must be even and >= 2, got {dim}")
    j = np.arange(dim // 2, dtype=np.float64)
    omega = 100.0 ** (2.0 * j / dim)
    phase = np.log(float(s)) / omega
    out = np.empty(dim, dtype=np.float64)
    out[0::2] = np.sin(phase)
    out[1::2] = np.cos(phase)
    return out
