"""World-anchored Gaussian noise, addressable rather than streamed.

Each draw is a pure function of (seed, level, timestep, world pixel x,
world pixel y, channel): a counter-based integer hash feeds the inverse
normal CDF.  Because values are addressed by *world* coordinates, two
generator windows that overlap in the world read identical noise in the
overlap, which is the mechanism that lets independently processed
windows agree bit-for-bit.
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtri

from ..errors import ContractError

__all__ = ["NoiseField", "level_key"]

_U64 = np.uint64
_M1 = _U64(0xBF58476D1CE4E5B9)
_M2 = _U64(0x94D049BB133111EB)
_GOLDEN = _U64(0x9E3779B97F4A7C15)


def _mix(z: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer, vectorized over uint64 arrays."""
    with np.errstate(over="ignore"):  # wraparound is the point
        z = (z ^ (z >> _U64(30))) * _M1
        z = (z ^ (z >> _U64(27))) * _M2
        return z ^ (z >> _U64(31))


def _feed(h: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Absorb one key component into the running hash."""
    with np.errstate(over="ignore"):
        return _mix(h ^ _mix(v + _GOLDEN))


def _as_u64(v) -> np.ndarray:
    # int64 -> uint64 keeps two's-complement bits, so negative world
    # coordinates hash fine
    return np.asarray(v, dtype=np.int64).astype(_U64)


def level_key(gsd: float, domain: int = 0) -> int:
    """Stable integer key for a noise plane.

    Combines the bit pattern of the gsd with a small domain tag so pixel
    space, latent space, and per-view planes never collide.
    """
    bits = np.float64(gsd).view(np.int64)
    return int(np.int64(bits) ^ (np.int64(domain) * np.int64(0x9E3779B9)))


class NoiseField:
    """Deterministic unbounded field of unit Gaussians."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._base = _mix(_as_u64(self.seed) + _GOLDEN)

    def _grid_hash(self, level: int, timestep: int, x0: int, y0: int,
                   height: int, width: int, channels: int) -> np.ndarray:
        h0 = _feed(_feed(self._base, _as_u64(level)), _as_u64(timestep))
        hy = _feed(h0, _as_u64(np.arange(y0, y0 + height)))[:, None]
        hx = _feed(hy, _as_u64(np.arange(x0, x0 + width))[None, :])
        ck = _mix(_as_u64(np.arange(channels)) + _GOLDEN)
        return _mix(hx[:, :, None] ^ ck[None, None, :])

    def draw_grid(self, level: int, timestep: int, x0: int, y0: int,
                  height: int, width: int, channels: int = 1,
                  dtype=np.float64) -> np.ndarray:
        """Gaussian block for world pixels [x0, x0+w) x [y0, y0+h).

        Returns an (height, width, channels) array.  The value at a given
        (level, timestep, world x, world y, channel) never depends on the
        block it was requested through.
        """
        if height < 1 or width < 1 or channels < 1:
            raise ContractError("draw_grid extent must be at least 1x1x1")
        h = self._grid_hash(int(level), int(timestep), int(x0), int(y0),
                            int(height), int(width), int(channels))
        # 51-bit mantissa keeps u strictly inside (0, 1); 2**53-wide
        # uniforms can round to exactly 1.0 and send ndtri to +inf
        u = (h >> _U64(13)).astype(np.float64)
        u += 0.5
        u *= 2.0 ** -51
        g = ndtri(u)
        return g.astype(dtype, copy=False)

    def draw(self, level: int, timestep: int, world_x: int, world_y: int,
             channel: int = 0) -> float:
        """Single Gaussian value; scalar convenience over draw_grid."""
        block = self.draw_grid(level, timestep, world_x, world_y, 1, 1, channel + 1)
        return float(block[0, 0, channel])
