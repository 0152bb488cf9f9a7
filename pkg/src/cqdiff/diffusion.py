"""Conditional DDPM core: schedule, forward marginal, reverse kernel, sampling, loss.

Diffusion steps are 1-based (t = 1..steps) everywhere in this module. Arrays may
be numpy arrays or torch tensors; when ``t`` is an integer array it indexes the
leading (batch) axis.

Two coefficients follow standard DDPM rather than the literal printed form:
the forward marginal uses sqrt(1 - alpha_bar_t) for the noise term and the
reverse mean is scaled by 1 / sqrt(alpha_hat_t). The reverse-kernel variance
beta_tilde is only the true posterior variance under that marginal.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

try:
    import torch
except ImportError:  # pragma: no cover
    torch = None


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    kind: str = "quadratic"
    beta_min: float = 1e-4
    beta_max: float = 0.5

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        if beta.ndim != 1 or beta.size < 1:
            raise ValueError("beta must be a non-empty 1-D array")
        if np.any(beta <= 0) or np.any(beta >= 1):
            raise ValueError("every beta_t must lie in (0, 1)")
        beta.setflags(write=False)
        object.__setattr__(self, "beta", beta)
        alpha_hat = 1.0 - beta
        alpha_bar = np.cumprod(alpha_hat)
        beta_tilde = beta.copy()
        beta_tilde[1:] = (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:]) * beta[1:]
        for name, arr in (("alpha_hat", alpha_hat), ("alpha_bar", alpha_bar), ("beta_tilde", beta_tilde)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def steps(self) -> int:
        return self.beta.size

    def params(self) -> dict:
        return {"steps": self.steps, "kind": self.kind, "beta_min": self.beta_min, "beta_max": self.beta_max}


def make_schedule(steps: int = 50, kind: str = "quadratic", beta_min: float = 1e-4, beta_max: float = 0.5) -> NoiseSchedule:
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if not 0.0 < beta_min <= beta_max < 1.0:
        raise ValueError(f"need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    if steps == 1:
        beta = np.array([beta_min])
    elif kind == "quadratic":
        beta = np.linspace(np.sqrt(beta_min), np.sqrt(beta_max), steps) ** 2
    elif kind == "linear":
        beta = np.linspace(beta_min, beta_max, steps)
    else:
        raise ValueError(f"kind must be 'linear' or 'quadratic', got {kind!r}")
    return NoiseSchedule(beta, kind, beta_min, beta_max)


def _check_t(t, steps: int) -> np.ndarray:
    t_arr = np.asarray(t.cpu() if torch is not None and isinstance(t, torch.Tensor) else t)
    if np.any(t_arr < 1) or np.any(t_arr > steps):
        raise ValueError(f"diffusion step must lie in [1, {steps}], got {t}")
    return t_arr


def _coef(table: np.ndarray, t, like):
    """table[t-1], shaped to broadcast against ``like`` (batch-indexed when t is an array)."""
    values = table[_check_t(t, len(table)) - 1]
    if np.ndim(values) == 1:
        values = values.reshape((-1,) + (1,) * (like.ndim - 1))
    if torch is not None and isinstance(like, torch.Tensor):
        return torch.as_tensor(values, dtype=like.dtype, device=like.device)
    return values


def forward_sample(x0, t, eps, schedule: NoiseSchedule):
    """x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps."""
    if tuple(x0.shape) != tuple(eps.shape):
        raise ValueError(f"x0 and eps shapes differ: {tuple(x0.shape)} vs {tuple(eps.shape)}")
    ab = _coef(schedule.alpha_bar, t, x0)
    return ab**0.5 * x0 + (1.0 - ab) ** 0.5 * eps


def predict_x0(x_t, t, eps_hat, schedule: NoiseSchedule):
    """Invert the forward marginal for a given noise estimate."""
    if np.any(schedule.alpha_bar[_check_t(t, schedule.steps) - 1] <= 0):
        raise ValueError("alpha_bar_t is 0; x0 cannot be recovered")
    ab = _coef(schedule.alpha_bar, t, x_t)
    return (x_t - (1.0 - ab) ** 0.5 * eps_hat) / ab**0.5


def posterior_mean(x_t, t, eps_hat, schedule: NoiseSchedule):
    beta = _coef(schedule.beta, t, x_t)
    ah = _coef(schedule.alpha_hat, t, x_t)
    ab = _coef(schedule.alpha_bar, t, x_t)
    return (x_t - beta / (1.0 - ab) ** 0.5 * eps_hat) / ah**0.5


def posterior_sigma(t: int, schedule: NoiseSchedule) -> float:
    _check_t(t, schedule.steps)
    return float(np.sqrt(schedule.beta_tilde[t - 1]))


EpsModel = Callable[..., np.ndarray]


def reverse_step(x_t, t: int, conditions, model: EpsModel, rng: np.random.Generator, schedule: NoiseSchedule):
    """One ancestral step; the last step (t = 1) adds no noise."""
    eps_hat = model(x_t, t, conditions)
    mean = posterior_mean(x_t, t, eps_hat, schedule)
    if t == 1:
        return mean
    return mean + posterior_sigma(t, schedule) * rng.standard_normal(np.shape(x_t))


def sample(conditions, model: EpsModel, schedule: NoiseSchedule, rng: np.random.Generator, shape=None):
    """Draw x_T ~ N(0, I) and run the reverse chain down to x_0.

    ``shape`` defaults to (len(conditions), 2), i.e. one T x 2 series.
    """
    if shape is None:
        shape = (len(conditions), 2)
    x = rng.standard_normal(shape)
    for t in range(schedule.steps, 0, -1):
        x = reverse_step(x, t, conditions, model, rng, schedule)
    return x


def eps_loss(x0_label, conditions, model: EpsModel, t, eps, schedule: NoiseSchedule):
    """Element-averaged squared error between the drawn noise and its estimate."""
    x_t = forward_sample(x0_label, t, eps, schedule)
    return ((eps - model(x_t, t, conditions)) ** 2).mean()
