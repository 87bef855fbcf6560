"""Rectified-flow training targets, losses, guidance and the Euler sampler.

Convention: ``z_t = (1 - t) z0 + t eps`` so ``t = 0`` is data and ``t = 1`` is
noise, and the network regresses the constant velocity ``eps - z0``. Sampling
integrates from ``t = 1`` down to ``t = 0`` with ``z <- z - (1/N) v``, which
recovers ``z0`` exactly when ``v`` is the true straight-line velocity.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import torch

from .conditioning import CONDITION_KEYS
from .exceptions import ConfigError, DimensionError, ValidationError

SYNC_THRESHOLD = 0.4


@dataclass
class FlowState:
    z0: torch.Tensor
    eps: torch.Tensor
    t: torch.Tensor
    zt: torch.Tensor
    target: torch.Tensor


@dataclass
class SamplerConfig:
    n_steps: int = 10
    cfg_scales: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ConfigError(f"n_steps must be a positive integer, got {self.n_steps}")
        self.n_steps = int(self.n_steps)
        check_scales(self.cfg_scales)


def check_scales(scales: dict) -> dict:
    for key, lam in scales.items():
        if key not in CONDITION_KEYS:
            raise ConfigError(f"unknown guidance condition {key!r}; expected one of {CONDITION_KEYS}")
        if lam < 0:
            raise ConfigError(f"guidance scale for {key!r} must be >= 0, got {lam}")
    return scales


def _broadcast_t(t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    return t.reshape(t.shape + (1,) * (like.dim() - t.dim()))


def sample_timesteps(n: int, generator: torch.Generator, sampler: Union[str, float, Callable] = "uniform",
                     dtype=torch.float32) -> torch.Tensor:
    if callable(sampler):
        return torch.as_tensor(sampler(n, generator), dtype=dtype)
    if isinstance(sampler, (int, float)):
        return torch.full((n,), float(sampler), dtype=dtype)
    if sampler == "uniform":
        return torch.rand(n, generator=generator, dtype=dtype)
    if sampler == "logit_normal":
        return torch.sigmoid(torch.randn(n, generator=generator, dtype=dtype))
    raise ConfigError(f"unknown timestep sampler {sampler!r}")


def make_flow_state(z0, seed: Union[int, torch.Generator] = 0, t_sampler="uniform") -> FlowState:
    """Noise a clean window (or batch of windows) along the straight path.

    ``z0`` is ``(T, D)`` or ``(B, T, D)``; one ``t`` is drawn per window.
    """
    z0 = torch.as_tensor(z0)
    if not torch.all(torch.isfinite(z0)):
        raise ValidationError("z0 contains non-finite values")
    gen = seed if isinstance(seed, torch.Generator) else torch.Generator().manual_seed(int(seed))
    batched = z0.dim() == 3
    n = z0.shape[0] if batched else 1
    t = sample_timesteps(n, gen, t_sampler, z0.dtype)
    if torch.any(t < 0) or torch.any(t > 1):
        raise ValidationError("timestep sampler produced values outside [0, 1]")
    eps = torch.randn(z0.shape, generator=gen, dtype=z0.dtype)
    if not batched:
        t = t[0]
    tb = _broadcast_t(t, z0)
    zt = (1 - tb) * z0 + tb * eps
    return FlowState(z0=z0, eps=eps, t=t, zt=zt, target=eps - z0)


def rf_loss(pred, target) -> torch.Tensor:
    if pred.shape != target.shape:
        raise DimensionError(f"prediction shape {tuple(pred.shape)} != target shape {tuple(target.shape)}")
    return torch.mean((pred - target) ** 2)


def velocity_loss(pred, target) -> torch.Tensor:
    """Match first and second forward differences along the frame axis."""
    if pred.shape != target.shape:
        raise DimensionError(f"prediction shape {tuple(pred.shape)} != target shape {tuple(target.shape)}")
    if pred.shape[-2] < 3:
        raise ValidationError("velocity loss needs at least 3 frames")
    d1 = torch.diff(target, n=1, dim=-2) - torch.diff(pred, n=1, dim=-2)
    d2 = torch.diff(target, n=2, dim=-2) - torch.diff(pred, n=2, dim=-2)
    return torch.mean(d1 ** 2) + torch.mean(d2 ** 2)


def sync_gate(alse_loss, tau: float = SYNC_THRESHOLD) -> float:
    if alse_loss is None:
        return 0.0
    if isinstance(alse_loss, torch.Tensor):
        alse_loss = alse_loss.detach()
    return 1.0 if float(alse_loss) < tau else 0.0


def total_loss(pred, state: FlowState, alse_loss: Optional[torch.Tensor] = None,
               tau: float = SYNC_THRESHOLD, rf_weight: float = 1.0, vel_weight: float = 1.0):
    """``L_RF + L_vel + lambda_sync * L_ALSE``; returns ``(loss, lambda_sync)``.

    ``lambda_sync`` is 1 only when a sync loss is given and it is below ``tau``.
    """
    loss = rf_weight * rf_loss(pred, state.target) + vel_weight * velocity_loss(pred, state.target)
    lam = sync_gate(alse_loss, tau)
    if lam:
        loss = loss + lam * alse_loss
    return loss, lam


def predict_clean(zt, t, v):
    """Clean-sample estimate ``z_t - t v`` (exact under the true velocity)."""
    t = torch.as_tensor(t, dtype=zt.dtype)
    return zt - _broadcast_t(t, zt) * v


def cfg_combine(model, cond, t, z, scales: Optional[dict] = None):
    """Multi-condition classifier-free guidance.

    ``(1 + sum l_c) v(z, t, C) - sum l_c v(z, t, C with c dropped)``; conditions
    with a zero scale are not evaluated.
    """
    scales = check_scales(dict(scales or {}))
    v = model(z, t, cond)
    active = [(k, float(lam)) for k, lam in scales.items() if lam > 0]
    if not active:
        return v
    out = (1.0 + sum(lam for _, lam in active)) * v
    for key, lam in active:
        out = out - lam * model(z, t, cond.without(key))
    return out


def initial_noise(shape, seed: int, dtype=torch.float32) -> torch.Tensor:
    return torch.randn(shape, generator=torch.Generator().manual_seed(int(seed)), dtype=dtype)


@torch.no_grad()
def euler_sample(model, cond, num_frames: int, sampler_cfg: SamplerConfig = None, *,
                 motion_dim: Optional[int] = None, batch_size: Optional[int] = None,
                 noise: Optional[torch.Tensor] = None, dtype=torch.float32) -> torch.Tensor:
    """Integrate from seeded noise at ``t = 1`` to ``t = 0`` in ``n_steps`` uniform steps."""
    sampler_cfg = sampler_cfg or SamplerConfig()
    if noise is None:
        if motion_dim is None:
            motion_dim = model.cfg.motion_dim
        shape = (num_frames, motion_dim) if batch_size is None else (batch_size, num_frames, motion_dim)
        noise = initial_noise(shape, sampler_cfg.seed, dtype)
    z = noise.clone()
    n = sampler_cfg.n_steps
    dt = 1.0 / n
    for i in range(n):
        t = 1.0 - i * dt
        z = z - dt * cfg_combine(model, cond, t, z, sampler_cfg.cfg_scales)
    return z
