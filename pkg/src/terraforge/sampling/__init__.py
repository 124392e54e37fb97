"""Diffusion sampling: schedules, steppers, noise field, codecs, backends."""

from .backends import (
    AnalyticDenoiser,
    ConditionDenoiser,
    ProceduralHeightBackend,
    ProceduralRefiner,
    get_backend,
    known_backends,
    register_backend,
)
from .codec import BlockCodec, IdentityCodec, get_codec
from .noise_field import NoiseField, level_key
from .sampler import (
    Conditioning,
    DenoiserBackend,
    ddim_step,
    ddpm_step,
    default_step_list,
    epsilon_loss,
    forward_diffuse,
    sample,
)
from .schedule import NoiseSchedule

__all__ = [
    "AnalyticDenoiser",
    "ConditionDenoiser",
    "ProceduralHeightBackend",
    "ProceduralRefiner",
    "get_backend",
    "known_backends",
    "register_backend",
    "BlockCodec",
    "IdentityCodec",
    "get_codec",
    "NoiseField",
    "level_key",
    "Conditioning",
    "DenoiserBackend",
    "ddim_step",
    "ddpm_step",
    "default_step_list",
    "epsilon_loss",
    "forward_diffuse",
    "sample",
    "NoiseSchedule",
]
