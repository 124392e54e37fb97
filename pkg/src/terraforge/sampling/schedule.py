"""Forward-process noise schedules.

Timesteps are 1-based: t runs from 1 to T, and abar(0) == 1 by
convention, so abar(1) = 1 - beta_1 uses the first beta only.  Arrays
are stored at index t-1.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ContractError

__all__ = ["NoiseSchedule"]


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance schedule of a Gaussian forward process.

    Attributes:
        kind: schedule family name ("linear" is the built-in).
        beta: (T,) per-step variances, each in (0, 1).
        beta_start / beta_end: generator parameters kept for serialization.
    """

    kind: str
    beta: np.ndarray
    beta_start: float
    beta_end: float
    alpha_bar: np.ndarray = field(init=False, repr=False)
    sigma: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        if beta.ndim != 1 or beta.size < 1:
            raise ContractError("beta must be a non-empty 1-D array")
        if np.any(beta <= 0) or np.any(beta >= 1):
            raise ContractError("every beta must lie in (0, 1)")
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha_bar", np.cumprod(1.0 - beta))
        # default per-step sampling noise: sigma_t = sqrt(beta_t)
        object.__setattr__(self, "sigma", np.sqrt(beta))

    @classmethod
    def linear(cls, T: int = 50, beta_start: float = 1e-4, beta_end: float = 2e-2) -> "NoiseSchedule":
        if T < 1:
            raise ContractError(f"T must be >= 1, got {T}")
        return cls("linear", np.linspace(beta_start, beta_end, T), beta_start, beta_end)

    @property
    def T(self) -> int:
        return len(self.beta)

    def check_t(self, t: int) -> int:
        t = int(t)
        if not 1 <= t <= self.T:
            raise ContractError(f"timestep {t} outside [1, {self.T}]")
        return t

    def abar(self, t: int) -> float:
        """Cumulative signal fraction; abar(0) is exactly 1."""
        t = int(t)
        if t == 0:
            return 1.0
        return float(self.alpha_bar[self.check_t(t) - 1])

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "T": self.T,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
        }

    @classmethod
    def from_json(cls, obj: dict | str | Path) -> "NoiseSchedule":
        if not isinstance(obj, dict):
            obj = json.loads(Path(obj).read_text())
        if obj.get("kind") != "linear":
            raise ContractError(f"unknown schedule kind {obj.get('kind')!r}")
        return cls.linear(obj["T"], obj["beta_start"], obj["beta_end"])
