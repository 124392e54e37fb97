"""Built-in denoiser backends and the backend registry.

Two families ship with the package:

* analytic backends with a closed-form optimal prediction, used as
  correctness oracles for the steppers;
* procedural backends that steer sampling toward a target synthesized
  from the conditioning (and, for texture detail, from the window's own
  starting noise).  They are receptive-field bounded: every output pixel
  depends only on inputs within a declared Chebyshev radius, which is
  what makes overlapping windows agree bit-for-bit when their inputs
  agree.
"""

from __future__ import annotations

import threading
import weakref

import numpy as np

from .._arrays import box_blur_local, luminance
from ..core.raster import RasterGrid
from ..errors import ContractError, RegistryError
from .codec import BlockCodec, IdentityCodec
from .sampler import Conditioning
from .schedule import NoiseSchedule

__all__ = [
    "AnalyticDenoiser",
    "ConditionDenoiser",
    "ProceduralRefiner",
    "ProceduralHeightBackend",
    "register_backend",
    "get_backend",
    "known_backends",
]


class _TargetSeeking:
    """Base for backends predicting noise toward a per-window target.

    eps_hat = (x_t - sqrt(abar_t) * target) / sqrt(1 - abar_t) is the
    exact expectation when the data distribution is a point mass at the
    target, so the deterministic sampler lands on the target itself.
    Subclasses build the target from the conditioning; it is memoized
    per Conditioning instance because it does not depend on t.
    """

    receptive_radius: int | None = None
    task = "image"  # which pipeline stage the backend is meant to serve

    def __init__(self, schedule: NoiseSchedule):
        self.schedule = schedule
        self._cache = weakref.WeakKeyDictionary()
        self._lock = threading.Lock()

    def _target(self, cond: Conditioning) -> np.ndarray:
        raise NotImplementedError

    def predict(self, x_t: np.ndarray, t: int, cond: Conditioning) -> np.ndarray:
        with self._lock:
            target = self._cache.get(cond)
        if target is None:
            target = self._target(cond)
            with self._lock:
                self._cache[cond] = target
        a = self.schedule.abar(t)
        if target.shape != x_t.shape:
            target = np.broadcast_to(target, x_t.shape)
        num = np.subtract(x_t, np.multiply(target, np.sqrt(a), dtype=x_t.dtype))
        return np.multiply(num, 1.0 / np.sqrt(1.0 - a), out=num)


class AnalyticDenoiser(_TargetSeeking):
    """Closed-form denoiser for point-mass or isotropic Gaussian data.

    With data_std == 0 the prediction steers exactly to ``x0_star``.
    With data_std > 0 it is the posterior-mean prediction for data
    distributed N(x0_star, data_std^2 I).
    """

    receptive_radius = 0
    task = "any"

    def __init__(self, schedule: NoiseSchedule, x0_star: np.ndarray, data_std: float = 0.0):
        super().__init__(schedule)
        self.x0_star = np.asarray(x0_star)
        if data_std < 0:
            raise ContractError("data_std must be >= 0")
        self.data_std = float(data_std)

    def predict(self, x_t: np.ndarray, t: int, cond: Conditioning) -> np.ndarray:
        a = self.schedule.abar(t)
        mu = self.x0_star
        if self.data_std == 0.0:
            x0_exp = np.broadcast_to(mu, x_t.shape)
        else:
            v = self.data_std ** 2
            denom = a * v + (1.0 - a)
            x0_exp = (v * np.sqrt(a) * x_t + (1.0 - a) * mu) / denom
        return (x_t - np.sqrt(a) * x0_exp) / np.sqrt(1.0 - a)

    def _target(self, cond):  # pragma: no cover - predict is overridden
        return self.x0_star


class ConditionDenoiser(_TargetSeeking):
    """Steers exactly to a named conditioning image; radius 0."""

    receptive_radius = 0
    task = "any"

    def __init__(self, schedule: NoiseSchedule, key: str = "cond"):
        super().__init__(schedule)
        self.key = str(key)

    def _target(self, cond: Conditioning) -> np.ndarray:
        try:
            return np.asarray(cond.images[self.key])
        except KeyError:
            raise ContractError(
                f"ConditionDenoiser needs a {self.key!r} conditioning image"
            ) from None


class ProceduralRefiner(_TargetSeeking):
    """Detail-adding refiner with a bounded receptive field.

    The target sharpens local structure of the conditioning (an unsharp
    mask over a (2r+1)^2 box) and adds band-limited stochastic texture
    obtained by blurring the window's world-anchored starting noise:

        target = clip(cond + sg * (cond - boxmean_r(cond))
                           + dg * boxmean_rd(init_noise), 0, 1)

    Radius 0 disables both blurs, making the backend strictly pointwise.
    """

    def __init__(self, schedule: NoiseSchedule, radius: int = 4,
                 detail_radius: int = 2, structure_gain: float = 0.3,
                 detail_gain: float = 0.08):
        super().__init__(schedule)
        if radius < 0 or detail_radius < 0:
            raise ContractError("radii must be >= 0")
        self.radius = int(radius)
        self.detail_radius = min(int(detail_radius), self.radius)
        self.structure_gain = float(structure_gain)
        self.detail_gain = float(detail_gain)
        self.receptive_radius = self.radius

    def _target(self, cond: Conditioning) -> np.ndarray:
        try:
            base = np.asarray(cond.images["cond"])
            noise = np.asarray(cond.images["init_noise"])
        except KeyError as missing:
            raise ContractError(f"ProceduralRefiner needs conditioning image {missing}") from None
        target = base.copy()
        if self.structure_gain != 0.0 and self.radius > 0:
            lowpass = box_blur_local(base, self.radius)
            target += self.structure_gain * (base - lowpass)
        if self.detail_gain != 0.0:
            detail = box_blur_local(noise, self.detail_radius)
            target += np.asarray(self.detail_gain, dtype=target.dtype) * detail
        return np.clip(target, 0.0, 1.0, out=target)


class ProceduralHeightBackend(_TargetSeeking):
    """Latent-space height predictor driven by image luminance.

    Works in the latent space of ``codec``: the conditioning carries the
    encoded image window ("cond_latent") and the starting latent noise
    ("init_noise_latent").  The pixel-space height target is a monotone
    shaping of smoothed luminance (bright built-up pixels rise steeply
    above a soft threshold) plus low-amplitude terrain detail from the
    decoded starting noise; the target is then re-encoded so prediction
    happens entirely in latent coordinates.
    """

    task = "height"

    def __init__(self, schedule: NoiseSchedule, codec, smooth_radius: int = 2,
                 detail_radius: int = 2, detail_gain: float = 0.02,
                 base_level: float = 0.08, terrain_gain: float = 0.15,
                 step_level: float = 0.62, step_sharpness: float = 14.0):
        super().__init__(schedule)
        self.codec = codec
        self.smooth_radius = int(smooth_radius)
        self.detail_radius = int(detail_radius)
        self.detail_gain = float(detail_gain)
        self.base_level = float(base_level)
        self.terrain_gain = float(terrain_gain)
        self.step_level = float(step_level)
        self.step_sharpness = float(step_sharpness)
        # latent-pixel radius: pixel-space blurs couple at most this many
        # blocks on either side of a latent pixel
        px = max(self.smooth_radius, self.detail_radius)
        self.receptive_radius = -(-px // codec.factor) + 1

    def shaping_curve(self, lum: np.ndarray) -> np.ndarray:
        """Monotone luminance -> normalized height in [0, 1]."""
        gate = 1.0 / (1.0 + np.exp(-self.step_sharpness * (lum - self.step_level)))
        h = self.base_level + self.terrain_gain * lum + (1.0 - self.base_level
             - self.terrain_gain - self.detail_gain) * gate
        return h

    def _target(self, cond: Conditioning) -> np.ndarray:
        try:
            z_cond = np.asarray(cond.images["cond_latent"])
            z_noise = np.asarray(cond.images["init_noise_latent"])
        except KeyError as missing:
            raise ContractError(f"height backend needs conditioning image {missing}") from None
        single = z_cond.ndim == 3
        if single:
            z_cond, z_noise = z_cond[None], z_noise[None]
        targets = np.empty_like(z_cond)
        for i in range(z_cond.shape[0]):
            rgb = self.codec.decode(RasterGrid(z_cond[i], gsd=1.0)).data
            lum = box_blur_local(luminance(rgb), self.smooth_radius, axes=(-3, -2))
            h = self.shaping_curve(lum)
            noise_px = self.codec.decode(RasterGrid(z_noise[i], gsd=1.0)).data
            detail = box_blur_local(noise_px[..., :1], self.detail_radius, axes=(-3, -2))
            h = np.clip(h + self.detail_gain * detail, 0.0, 1.0)
            h3 = np.repeat(h, self.codec.image_channels, axis=-1)
            targets[i] = self.codec.encode(RasterGrid(h3, gsd=1.0)).data
        return targets[0] if single else targets


_REGISTRY: dict[str, callable] = {}


def register_backend(name: str, factory):
    """Register a backend factory(schedule, **kwargs)."""
    _REGISTRY[name] = factory


def get_backend(name: str, schedule: NoiseSchedule, **kwargs):
    """Instantiate a backend by registry name."""
    try:
        factory = _REGISTRY[name]
    except KeyError:
        raise RegistryError(f"unknown backend {name!r}; known: {sorted(_REGISTRY)}") from None
    return factory(schedule, **kwargs)


def known_backends() -> list[str]:
    return sorted(_REGISTRY)


register_backend("analytic", lambda sched, **kw: AnalyticDenoiser(sched, **kw))
register_backend("condition", lambda sched, **kw: ConditionDenoiser(sched, **kw))
register_backend("refiner", lambda sched, **kw: ProceduralRefiner(sched, **kw))
register_backend(
    "height",
    lambda sched, codec=None, **kw: ProceduralHeightBackend(
        sched, codec if codec is not None else BlockCodec(), **kw
    ),
)
