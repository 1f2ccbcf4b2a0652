"""Noise schedule, forward noising, epsilon-prediction loss and a guided DDIM sampler."""

from __future__ import annotations

from typing import Callable

import numpy as np
import torch

from .errors import ShapeMismatch, TimestepOutOfRange


class NoiseSchedule:
    """Linear beta schedule; ``alpha_bars[t] = prod_{s<=t} (1 - beta_s)``."""

    def __init__(self, num_train_steps: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02):
        if num_train_steps < 1 or not 0 < beta_start <= beta_end < 1:
            raise ValueError("invalid schedule parameters")
        self.num_train_steps = num_train_steps
        self.betas = np.linspace(beta_start, beta_end, num_train_steps, dtype=np.float64)
        self.alpha_bars = np.cumprod(1.0 - self.betas)

    def alpha_bar(self, t) -> torch.Tensor:
        t = torch.as_tensor(t)
        if t.numel() and (int(t.min()) < 0 or int(t.max()) >= self.num_train_steps):
            raise TimestepOutOfRange(f"timestep outside [0, {self.num_train_steps})")
        return torch.from_numpy(self.alpha_bars)[t.long()]

    def inference_timesteps(self, steps: int) -> list[int]:
        """Evenly strided descending timesteps, e.g. 980, 960, ..., 0 for 50 of 1000."""
        if steps < 1:
            raise ValueError("steps must be >= 1")
        stride = self.num_train_steps // steps
        if stride == 0:
            raise ValueError(f"{steps} steps exceed {self.num_train_steps} training steps")
        return [i * stride for i in reversed(range(steps))]


def _expand(a: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    return a.to(like.dtype).reshape(a.shape + (1,) * (like.dim() - a.dim()))


def add_noise(x0: torch.Tensor, epsilon: torch.Tensor, t, sched: NoiseSchedule) -> torch.Tensor:
    """``sqrt(ab_t) x0 + sqrt(1 - ab_t) eps``; ``t`` is a scalar or one timestep per batch item."""
    if x0.shape != epsilon.shape:
        raise ShapeMismatch(f"x0 {tuple(x0.shape)} vs noise {tuple(epsilon.shape)}")
    ab = _expand(sched.alpha_bar(t), x0)
    return ab.sqrt() * x0 + (1 - ab).sqrt() * epsilon


def diffusion_loss(pred_noise: torch.Tensor, epsilon: torch.Tensor) -> torch.Tensor:
    if pred_noise.shape != epsilon.shape:
        raise ShapeMismatch(f"prediction {tuple(pred_noise.shape)} vs noise {tuple(epsilon.shape)}")
    return ((pred_noise - epsilon) ** 2).mean()


def guided_noise(eps_cond: torch.Tensor, eps_uncond: torch.Tensor, guidance: float) -> torch.Tensor:
    if guidance == 1.0:
        return eps_cond
    return eps_uncond + guidance * (eps_cond - eps_uncond)


def ddim_step(x: torch.Tensor, eps: torch.Tensor, ab_t: float, ab_prev: float) -> torch.Tensor:
    x0 = (x - (1 - ab_t) ** 0.5 * eps) / ab_t ** 0.5
    return ab_prev ** 0.5 * x0 + (1 - ab_prev) ** 0.5 * eps


def sample(model: Callable, shape, sched: NoiseSchedule, cond=None, uncond=None, steps: int = 50,
           guidance: float = 6.0, seed: int = 0, x_init: torch.Tensor | None = None, start_t: int | None = None,
           callback: Callable | None = None, dtype=torch.float32) -> torch.Tensor:
    """Deterministic DDIM (eta = 0) with classifier-free guidance.

    ``model(x, t, c)`` returns predicted noise for a batch at integer timestep
    ``t``; ``c`` is ``cond`` or ``uncond``. Starting noise comes from ``seed``
    unless ``x_init`` is given; ``start_t`` skips schedule steps above it, which
    gives partial (image-to-image style) denoising from a noised input.
    ``callback(i, t, x)`` runs after each step.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    timesteps = sched.inference_timesteps(steps)
    if start_t is not None:
        timesteps = [t for t in timesteps if t <= start_t]
    if x_init is None:
        g = torch.Generator().manual_seed(int(seed))
        x = torch.randn(tuple(shape), generator=g, dtype=torch.float64).to(dtype)
    else:
        x = x_init.clone()
    ab = sched.alpha_bars
    for i, t in enumerate(timesteps):
        eps_c = model(x, t, cond)
        eps = eps_c if guidance == 1.0 else guided_noise(eps_c, model(x, t, uncond), guidance)
        ab_prev = ab[timesteps[i + 1]] if i + 1 < len(timesteps) else 1.0
        x = ddim_step(x, eps, float(ab[t]), float(ab_prev))
        if callback is not None:
            callback(i, t, x)
    return x
