"""Invertible block-space codecs for latent-space generation.

A codec folds f x f pixel blocks into single latent pixels so diffusion
can run at 1/f resolution.  Both built-ins are strictly block-local:
latent pixel (u, v) is a function of image block (u, v) alone and vice
versa, which preserves the overlap-consistency argument of the tiler in
latent space.
"""

from __future__ import annotations

import numpy as np

from ..core.raster import RasterGrid
from ..errors import ContractError, RegistryError

__all__ = ["IdentityCodec", "BlockCodec", "get_codec"]


class IdentityCodec:
    """f=1 pass-through codec; latent space equals pixel space."""

    factor = 1
    image_channels = 3
    latent_channels = 3

    def encode(self, raster: RasterGrid) -> RasterGrid:
        self._check(raster, self.image_channels)
        return RasterGrid(raster.data, raster.gsd, raster.anchor)

    def decode(self, latent: RasterGrid) -> RasterGrid:
        self._check(latent, self.latent_channels)
        return RasterGrid(latent.data, latent.gsd, latent.anchor)

    @staticmethod
    def _check(raster: RasterGrid, channels: int):
        if raster.channels != channels:
            raise ContractError(f"expected {channels} channels, got {raster.channels}")


class BlockCodec:
    """Orthonormal per-block transform over f x f x 3 pixel blocks.

    encode maps (H, W, 3) to (H/f, W/f, 3 f^2): pixels of each block are
    flattened in (dy, dx, channel) order and rotated by a fixed seeded
    orthonormal matrix.  decode applies the transpose, so the round trip
    is exact up to float rounding.
    """

    image_channels = 3

    def __init__(self, factor: int = 4, seed: int = 7):
        if factor < 1:
            raise ContractError(f"factor must be >= 1, got {factor}")
        self.factor = int(factor)
        self.latent_channels = self.image_channels * self.factor ** 2
        rng = np.random.Generator(np.random.PCG64(seed))
        q, r = np.linalg.qr(rng.standard_normal((self.latent_channels, self.latent_channels)))
        # fix the sign convention so the matrix is fully determined by the seed
        self._mat = q * np.sign(np.diag(r))[None, :]

    def encode(self, raster: RasterGrid) -> RasterGrid:
        f = self.factor
        if raster.channels != self.image_channels:
            raise ContractError(f"expected {self.image_channels} channels, got {raster.channels}")
        if raster.height % f or raster.width % f:
            raise ContractError(
                f"raster {raster.width}x{raster.height} not divisible by block factor {f}"
            )
        h, w = raster.height // f, raster.width // f
        d = raster.data.astype(np.float64, copy=False)
        blocks = d.reshape(h, f, w, f, self.image_channels).transpose(0, 2, 1, 3, 4)
        flat = blocks.reshape(h, w, self.latent_channels)
        z = flat @ self._mat.T
        return RasterGrid(z, raster.gsd * f, raster.anchor)

    def decode(self, latent: RasterGrid) -> RasterGrid:
        f = self.factor
        if latent.channels != self.latent_channels:
            raise ContractError(f"expected {self.latent_channels} channels, got {latent.channels}")
        h, w = latent.height, latent.width
        flat = latent.data.astype(np.float64, copy=False) @ self._mat
        blocks = flat.reshape(h, w, f, f, self.image_channels).transpose(0, 2, 1, 3, 4)
        data = blocks.reshape(h * f, w * f, self.image_channels)
        return RasterGrid(data, latent.gsd / f, latent.anchor)


_CODECS = {
    "identity": IdentityCodec,
    "block4": lambda: BlockCodec(factor=4),
}


def get_codec(name: str):
    """Look up a codec by registry name ("identity" or "block4")."""
    try:
        return _CODECS[name]()
    except KeyError:
        raise RegistryError(f"unknown codec {name!r}; known: {sorted(_CODECS)}") from None
