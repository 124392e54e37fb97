"""Forward diffusion and the two reverse-process steppers.

Everything here is shape-agnostic over leading axes: state arrays are
(..., H, W, C) and a batch of windows rides along transparently.  The
iterated sampler and the single-step ops share one arithmetic kernel so
a one-step `sample` call is bit-identical to calling the step directly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Protocol, runtime_checkable

import numpy as np

from ..errors import ContractError, SamplingError
from .schedule import NoiseSchedule

logger = logging.getLogger(__name__)

__all__ = [
    "Conditioning",
    "DenoiserBackend",
    "forward_diffuse",
    "ddpm_step",
    "ddim_step",
    "sample",
    "epsilon_loss",
    "default_step_list",
]


@dataclass(eq=False)  # identity semantics: backends memoize per instance
class Conditioning:
    """Named conditioning inputs handed to a denoiser backend.

    Attributes:
        images: named arrays whose trailing dims match the state's
            spatial/batch layout (e.g. "cond" for the upsampled coarse
            image, "init_noise" for the window's starting noise).
        res_embedding: scale embedding vector for the target gsd.
        prompt: free-text instruction steering the backend.
        view_index: position on a camera trajectory, when relevant.
    """

    images: dict = field(default_factory=dict)
    res_embedding: np.ndarray | None = None
    prompt: str | None = None
    view_index: int | None = None


@runtime_checkable
class DenoiserBackend(Protocol):
    """Noise predictor contract.

    Implementations must be stateless or internally synchronized, and
    `predict` must be a pure function of its arguments: the tiler relies
    on re-running a window producing identical bits.

    Attributes:
        receptive_radius: Chebyshev radius r such that output pixel q
            never depends on input pixels farther than r (None if
            unbounded).
    """

    receptive_radius: int | None

    def predict(self, x_t: np.ndarray, t: int, cond: Conditioning) -> np.ndarray:
        ...


def _check_state(x: np.ndarray, name: str) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim < 3:
        raise ContractError(f"{name} must be at least (H, W, C), got shape {x.shape}")
    return x


def forward_diffuse(x0: np.ndarray, t: int, noise: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """Jump the clean signal straight to timestep t.

    x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.  t = 0 returns a copy
    of x0 (abar(0) == 1 exactly).
    """
    x0 = _check_state(x0, "x0")
    if int(t) == 0:
        return x0.copy()
    a = schedule.abar(t)
    noise = np.asarray(noise)
    if noise.shape != x0.shape:
        raise ContractError(f"noise shape {noise.shape} != x0 shape {x0.shape}")
    return np.sqrt(a) * x0 + np.sqrt(1.0 - a) * noise


def ddpm_step(x_t: np.ndarray, eps_hat: np.ndarray, t: int, schedule: NoiseSchedule,
              noise: np.ndarray | None = None) -> np.ndarray:
    """One ancestral reverse step from t to t-1.

    mean = (x_t - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(1 - beta_t),
    plus sigma_t * noise for t > 1.  The final step (t == 1) is
    deterministic and needs no noise.
    """
    x_t = _check_state(x_t, "x_t")
    t = schedule.check_t(t)
    beta = float(schedule.beta[t - 1])
    abar = schedule.abar(t)
    mean = (x_t - (beta / np.sqrt(1.0 - abar)) * eps_hat) / np.sqrt(1.0 - beta)
    if t == 1:
        return mean
    if noise is None:
        raise ContractError("ddpm_step requires a noise draw for t > 1")
    noise = np.asarray(noise)
    if noise.shape != x_t.shape:
        raise ContractError(f"noise shape {noise.shape} != state shape {x_t.shape}")
    return mean + float(schedule.sigma[t - 1]) * noise


def _ddim_coeffs(schedule: NoiseSchedule, t: int, t_prev: int, eta: float):
    a_t = schedule.abar(t)
    a_prev = schedule.abar(t_prev)
    sigma = 0.0
    if eta > 0.0 and t_prev > 0:
        sigma = eta * np.sqrt((1.0 - a_prev) / (1.0 - a_t)) * np.sqrt(1.0 - a_t / a_prev)
    dir_coef = np.sqrt(max(1.0 - a_prev - sigma * sigma, 0.0))
    return (np.sqrt(1.0 - a_t), 1.0 / np.sqrt(a_t), np.sqrt(a_prev), dir_coef, sigma)


def _ddim_apply(x, eps, coeffs, noise=None, x0h_buf=None, dir_buf=None, out=None):
    """Shared update kernel: x0_hat reconstruction then re-noise to t_prev.

    The buffered and unbuffered paths execute the same ufunc sequence,
    so results are bit-identical either way.
    """
    c_noise, c_inv, c_sig, c_dir, sigma = coeffs
    x0h = np.multiply(eps, c_noise, out=x0h_buf)
    x0h = np.subtract(x, x0h, out=x0h)
    x0h = np.multiply(x0h, c_inv, out=x0h)
    d = np.multiply(eps, c_dir, out=dir_buf)
    x0h = np.multiply(x0h, c_sig, out=x0h)
    out = np.add(x0h, d, out=out)
    if sigma > 0.0:
        out += sigma * noise
    return out


def ddim_step(x_t: np.ndarray, eps_hat: np.ndarray, t: int, t_prev: int,
              schedule: NoiseSchedule, eta: float = 0.0,
              noise: np.ndarray | None = None) -> np.ndarray:
    """Deterministic (eta=0) reverse jump from t to t_prev.

    Reconstructs x0_hat = (x_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t)
    and re-noises it to t_prev along the predicted direction:
    x_prev = sqrt(abar_prev) x0_hat + sqrt(1 - abar_prev - sigma^2) eps_hat
    (+ sigma * noise when eta > 0).  t_prev == t returns the state
    unchanged.

    Raises:
        ContractError: t_prev > t, t outside the schedule, or eta > 0
            without a noise draw.
    """
    x_t = _check_state(x_t, "x_t")
    t = schedule.check_t(t)
    t_prev = int(t_prev)
    if not 0 <= t_prev <= t:
        raise ContractError(f"t_prev={t_prev} must lie in [0, t={t}]")
    if t_prev == t:
        return x_t.copy()
    coeffs = _ddim_coeffs(schedule, t, t_prev, float(eta))
    if coeffs[4] > 0.0:
        if noise is None:
            raise ContractError("eta > 0 requires a noise draw")
        noise = np.asarray(noise)
    return _ddim_apply(x_t, np.asarray(eps_hat), coeffs, noise=noise)


def default_step_list(T: int, n_steps: int) -> list[int]:
    """Evenly spaced strictly-decreasing timesteps from T toward 1."""
    if n_steps < 1:
        raise ContractError(f"n_steps must be >= 1, got {n_steps}")
    if n_steps > T:
        n_steps = T
    ts = np.unique(np.rint(np.linspace(T, 1, n_steps)).astype(int))
    return [int(v) for v in ts[::-1]]


def _check_step_list(step_list, T: int) -> list[int]:
    steps = [int(t) for t in step_list]
    if not steps:
        raise ContractError("step list must not be empty")
    if steps[-1] != 0:
        steps = steps + [0]
    for a, b in zip(steps, steps[1:]):
        if b >= a:
            raise ContractError(f"step list must be strictly decreasing, got {step_list}")
    if steps[0] > T or steps[0] < 1:
        raise ContractError(f"first step {steps[0]} outside schedule [1, {T}]")
    return steps


def sample(backend: DenoiserBackend, shape: tuple, cond: Conditioning,
           init_noise: np.ndarray, step_list, schedule: NoiseSchedule) -> np.ndarray:
    """Iterate deterministic reverse jumps from pure noise to a sample.

    Args:
        backend: noise predictor.
        shape: expected trailing (H, W, C) of the state; leading batch
            axes on init_noise are allowed and preserved.
        cond: conditioning handed to every predict call.
        init_noise: x_T starting state.
        step_list: strictly decreasing timesteps; a terminal 0 is
            implied when absent, so [T] means a single jump to the data.
        schedule: the noise schedule both endpoints refer to.

    Returns:
        The t=0 state, same dtype as init_noise.
    """
    x = _check_state(np.asarray(init_noise), "init_noise")
    shape = tuple(int(v) for v in shape)
    if x.shape[-len(shape):] != shape:
        raise ContractError(f"init_noise trailing shape {x.shape} does not match {shape}")
    steps = _check_step_list(step_list, schedule.T)
    x = x.copy()
    x0h_buf = np.empty_like(x)
    dir_buf = np.empty_like(x)
    for i, (t, t_prev) in enumerate(zip(steps, steps[1:])):
        try:
            eps = backend.predict(x, t, cond)
        except Exception as exc:  # noqa: BLE001 - context is the point
            raise SamplingError(f"backend failed at step index {i} (t={t}): {exc}") from exc
        eps = np.asarray(eps)
        if eps.shape != x.shape:
            raise SamplingError(
                f"backend returned shape {eps.shape} at step index {i}, expected {x.shape}"
            )
        coeffs = _ddim_coeffs(schedule, t, t_prev, 0.0)
        x = _ddim_apply(x, eps, coeffs, x0h_buf=x0h_buf, dir_buf=dir_buf, out=x)
    return x


def epsilon_loss(eps_hat: np.ndarray, eps: np.ndarray) -> float:
    """Mean squared error of the noise prediction."""
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if eps_hat.shape != eps.shape:
        raise ContractError(f"shape mismatch {eps_hat.shape} vs {eps.shape}")
    diff = eps_hat - eps
    return float(np.mean(diff * diff))
