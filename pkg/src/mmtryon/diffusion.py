"""Noise schedules, the forward noising process, the noise-prediction loss and samplers.

Everything here works on plain ``torch`` tensors shaped ``[B, C, H, W]`` (or
``[C, H, W]`` for a single latent).  Latents at toy scale are images scaled to
``[-1, 1]``; see :func:`to_latent` / :func:`from_latent`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn as nn

from .errors import InvalidArgument, NumericalFailure

BETA_START = 1e-4
BETA_END = 2e-2
COSINE_OFFSET = 0.008
ALPHA_FLOOR = 1e-5


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal coefficients ``alpha[t]`` (often written alpha-bar)."""

    num_steps: int
    alpha: np.ndarray
    kind: str = "linear"

    def __post_init__(self):
        a = np.asarray(self.alpha, dtype=np.float64)
        if a.shape != (self.num_steps,):
            raise InvalidArgument(f"alpha must have length {self.num_steps}, got {a.shape}")
        if np.any(a <= 0) or np.any(a > 1):
            raise InvalidArgument("alpha values must lie in (0, 1]")
        if np.any(np.diff(a) > 0):
            raise InvalidArgument("alpha must be non-increasing")
        a.setflags(write=False)
        object.__setattr__(self, "alpha", a)

    def alpha_at(self, t):
        return float(self.alpha[t])


def make_schedule(num_steps: int, kind: str = "linear") -> NoiseSchedule:
    if int(num_steps) != num_steps or num_steps < 1:
        raise InvalidArgument(f"num_steps must be a positive integer, got {num_steps!r}")
    num_steps = int(num_steps)
    if kind == "linear":
        betas = np.linspace(BETA_START, BETA_END, num_steps, dtype=np.float64)
        alpha = np.cumprod(1.0 - betas)
    elif kind == "cosine":
        s = COSINE_OFFSET
        grid = (np.arange(1, num_steps + 1, dtype=np.float64) / num_steps + s) / (1 + s)
        alpha = np.cos(grid * math.pi / 2) ** 2 / math.cos(s / (1 + s) * math.pi / 2) ** 2
        alpha = np.clip(alpha, ALPHA_FLOOR, 1.0)
        # float noise can break monotonicity near the floor
        alpha = np.minimum.accumulate(alpha)
    else:
        raise InvalidArgument(f"unknown schedule kind {kind!r}")
    return NoiseSchedule(num_steps, alpha, kind)


def to_latent(img01: torch.Tensor) -> torch.Tensor:
    """Identity latent mapping: pixels in [0, 1] -> [-1, 1]."""
    return img01 * 2.0 - 1.0


def from_latent(z: torch.Tensor) -> torch.Tensor:
    return ((z + 1.0) / 2.0).clamp(0.0, 1.0)


def _coef(values, like: torch.Tensor) -> torch.Tensor:
    c = torch.as_tensor(values, dtype=like.dtype, device=like.device)
    if c.ndim == 0:
        return c
    return c.reshape(-1, *([1] * (like.ndim - 1)))


def forward_diffuse(z0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Sample ``z_t ~ q(z_t | z_0)`` with the supplied noise: ``sqrt(a_t) z0 + sqrt(1 - a_t) eps``.

    ``t`` may be an int (shared by the batch) or a length-B integer tensor.
    """
    if eps.shape != z0.shape:
        raise InvalidArgument(f"eps shape {tuple(eps.shape)} != z0 shape {tuple(z0.shape)}")
    t_arr = np.asarray(t.detach().cpu() if torch.is_tensor(t) else t)
    if np.any(t_arr < 0) or np.any(t_arr >= sched.num_steps):
        raise InvalidArgument(f"timestep {t_arr} outside [0, {sched.num_steps})")
    a = sched.alpha[t_arr]
    return _coef(np.sqrt(a), z0) * z0 + _coef(np.sqrt(1.0 - a), z0) * eps


def denoising_loss(eps_pred: torch.Tensor, eps_true: torch.Tensor) -> torch.Tensor:
    """Per-element mean squared error between predicted and true noise."""
    if eps_pred.shape != eps_true.shape:
        raise InvalidArgument(
            f"shape mismatch: {tuple(eps_pred.shape)} vs {tuple(eps_true.shape)}")
    return ((eps_true - eps_pred) ** 2).mean()


def sample_timesteps(batch: int, sched: NoiseSchedule, generator: torch.Generator) -> torch.Tensor:
    return torch.randint(0, sched.num_steps, (batch,), generator=generator)


def ddim_timesteps(num_steps: int, steps: int, start: Optional[int] = None) -> list[int]:
    start = num_steps - 1 if start is None else start
    ts = np.linspace(start, 0, steps).round().astype(int)
    # keep order, drop duplicates created by rounding
    out = []
    for t in ts:
        if not out or out[-1] != t:
            out.append(int(t))
    return out


NoiseModel = Callable[[torch.Tensor, torch.Tensor, object], torch.Tensor]


@torch.no_grad()
def sample(model: NoiseModel, condition, sched: NoiseSchedule, steps: int = 50,
           eta: float = 0.0, seed: int = 0, shape=None, init: Optional[torch.Tensor] = None,
           start_step: Optional[int] = None, guidance_scale: float = 1.0,
           clip_x0: bool = False, dtype=torch.float32) -> torch.Tensor:
    """DDIM sampler (``eta=0``) that becomes ancestral sampling at ``eta=1``.

    Starts from seeded pure noise of ``shape`` unless ``init`` is given, in which
    case ``init`` is treated as ``z_t`` at ``start_step`` (default: last step).
    With ``guidance_scale != 1`` the condition must provide ``unconditional()``
    and classifier-free guidance is applied.
    """
    if steps < 1 or steps > sched.num_steps:
        raise InvalidArgument(f"steps must be in [1, {sched.num_steps}], got {steps}")
    if not 0.0 <= eta <= 1.0:
        raise InvalidArgument(f"eta must be in [0, 1], got {eta}")
    gen = torch.Generator().manual_seed(int(seed))
    if init is None:
        if shape is None:
            raise InvalidArgument("either shape or init is required")
        z = torch.randn(tuple(shape), generator=gen, dtype=dtype)
    else:
        z = init.clone()
    if isinstance(model, nn.Module):
        z = z.to(next(model.parameters()).device)
    ts = ddim_timesteps(sched.num_steps, steps, start_step)
    uncond = condition.unconditional() if guidance_scale != 1.0 else None

    for i, t in enumerate(ts):
        t_vec = torch.full((z.shape[0],), t, dtype=torch.long, device=z.device)
        eps = model(z, t_vec, condition)
        if uncond is not None:
            eps_u = model(z, t_vec, uncond)
            eps = eps_u + guidance_scale * (eps - eps_u)
        a_t = sched.alpha_at(t)
        a_prev = sched.alpha_at(ts[i + 1]) if i + 1 < len(ts) else 1.0
        x0 = (z - math.sqrt(1.0 - a_t) * eps) / math.sqrt(a_t)
        if clip_x0:
            x0 = x0.clamp(-1.0, 1.0)
            eps = (z - math.sqrt(a_t) * x0) / math.sqrt(1.0 - a_t)
        sigma = eta * math.sqrt((1.0 - a_prev) / (1.0 - a_t)) * math.sqrt(max(0.0, 1.0 - a_t / a_prev))
        dir_coef = math.sqrt(max(0.0, 1.0 - a_prev - sigma ** 2))
        z = math.sqrt(a_prev) * x0 + dir_coef * eps
        if sigma > 0:
            noise = torch.randn(z.shape, generator=gen, dtype=z.dtype).to(z.device)
            z = z + sigma * noise
        if not torch.isfinite(z).all():
            raise NumericalFailure(f"non-finite values at sampling step {i} (t={t})", step=i)
    return z


# --------------------------------------------------------------------------- optional latent codec

class ConvAutoencoder(nn.Module):
    """Small 4x spatial autoencoder, the optional stand-in for a pretrained VAE.

    ``encode`` maps images in ``[-1, 1]`` to ``[B, latent_channels, H/4, W/4]``
    (tanh-bounded); ``decode`` inverts it approximately.
    """

    def __init__(self, channels: int = 3, latent_channels: int = 4, hidden: int = 32):
        super().__init__()
        self.channels, self.latent_channels = channels, latent_channels
        self.enc = nn.Sequential(
            nn.Conv2d(channels, hidden, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(hidden, hidden, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(hidden, latent_channels, 3, padding=1), nn.Tanh())
        self.dec = nn.Sequential(
            nn.Conv2d(latent_channels, hidden, 3, padding=1), nn.SiLU(),
            nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(hidden, hidden, 3, padding=1), nn.SiLU(),
            nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(hidden, channels, 3, padding=1))

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] % 4 or x.shape[-2] % 4:
            raise InvalidArgument(f"image size {tuple(x.shape[-2:])} not divisible by 4")
        return self.enc(x)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return self.dec(z)


def fit_autoencoder(ae: ConvAutoencoder, images: torch.Tensor, steps: int = 500, batch_size: int = 32,
                    lr: float = 1e-3, seed: int = 0) -> list[float]:
    """Reconstruction-MSE training on ``images`` (in ``[-1, 1]``); returns the loss curve."""
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(ae.parameters(), lr=lr)
    losses = []
    for _ in range(steps):
        idx = torch.randint(0, images.shape[0], (min(batch_size, images.shape[0]),), generator=gen)
        x = images[idx]
        loss = ((ae.decode(ae.encode(x)) - x) ** 2).mean()
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        losses.append(loss.item())
    return losses
