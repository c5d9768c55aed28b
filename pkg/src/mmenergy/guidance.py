"""Deterministic DDIM sampling with cosine-similarity guidance.

The sampler runs the standard eta=0 DDIM recursion over a pretrained noise
predictor: estimate the clean image from the current state and predicted
noise, then re-noise to the previous timestep reusing the same noise
estimate.  Guidance nudges the clean-image estimate once per step along the
pixel gradient of the image-text cosine similarity before re-noising; the
noise estimate itself is left untouched.  With guidance scale zero the
guided path is bit-identical to the unguided one.

A small UNet-style denoiser trained on the shapes dataset ships as the
fixture; ``DenoiserHandle`` is the adapter contract for wrapping any
external unconditional diffusion model (a callable plus its cumulative
alpha schedule and native resolution, pixels in [0, 1]).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import torch
import torch.nn as nn
import torch.nn.functional as F

from mmenergy.encoders import TextTokens, TowerPair, encode_text
from mmenergy.errors import ConfigError, InputError, NumericsError
from mmenergy.seeding import derive_seed, make_generator
from mmenergy.serialize import load_container, save_container

_KIND_DENOISER = "denoiser"

SCALE_CONSTANT = "constant"
SCALE_LINEAR_DECAY = "linear_decay"


@dataclass
class GuidanceConfig:
    scale: float = 0.0                # guidance strength on the clean-image estimate
    ddim_steps: int = 25
    eta: float = 0.0                  # only the deterministic sampler is supported
    scale_schedule: str = SCALE_CONSTANT
    clip_denoised: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        if self.scale < 0:
            raise ConfigError("guidance scale must be >= 0")
        if self.ddim_steps < 1:
            raise ConfigError("ddim_steps must be >= 1")
        if self.eta != 0.0:
            raise ConfigError("only eta=0 (deterministic DDIM) is supported")
        if self.scale_schedule not in (SCALE_CONSTANT, SCALE_LINEAR_DECAY):
            raise ConfigError(f"unknown scale schedule {self.scale_schedule!r}")


@dataclass
class DenoiserHandle:
    """Adapter around a noise predictor ``model(x_t, t_index) -> eps_hat``.

    ``alpha_bar`` is the cumulative signal schedule indexed by timestep,
    strictly decreasing; the model operates on pixels in [0, 1].
    """

    model: Callable[[torch.Tensor, int], torch.Tensor]
    alpha_bar: torch.Tensor
    resolution: int

    def __post_init__(self) -> None:
        if self.alpha_bar.ndim != 1 or self.alpha_bar.shape[0] < 2:
            raise ConfigError("alpha_bar must be a 1-D schedule of length >= 2")
        if (self.alpha_bar <= 0).any() or (self.alpha_bar >= 1).any():
            raise ConfigError("alpha_bar values must lie strictly inside (0, 1)")
        if not (self.alpha_bar[1:] < self.alpha_bar[:-1]).all():
            raise ConfigError("alpha_bar must be strictly decreasing")


def linear_alpha_bar(timesteps: int = 200, high: float = 0.9995, low: float = 0.003) -> torch.Tensor:
    """Linear cumulative-alpha schedule from nearly clean to nearly pure noise."""
    if timesteps < 2:
        raise ConfigError("schedule needs at least 2 timesteps")
    return torch.linspace(high, low, timesteps)


def ddim_timesteps(total: int, steps: int) -> list[int]:
    """Evenly spaced strictly decreasing timestep indices, ending at 0."""
    if steps > total:
        raise ConfigError(f"cannot take {steps} DDIM steps over {total} timesteps")
    if steps == 1:
        return [total - 1]
    raw = [round((total - 1) * (1 - i / (steps - 1))) for i in range(steps)]
    out = []
    for t in raw:
        if not out or t < out[-1]:
            out.append(t)
    return out


def ddim_sample(
    handle: DenoiserHandle,
    config: GuidanceConfig,
    batch: int = 1,
    _guide: Callable[[int, torch.Tensor], torch.Tensor] | None = None,
) -> torch.Tensor:
    """Deterministic DDIM trajectory from seeded Gaussian noise.

    Per step: predict noise, form the clean-image estimate, optionally clamp
    it to [0, 1], and re-noise to the next timestep with the same noise
    estimate.  The last step re-noises to a fully clean state, so the return
    value is the final clean-image estimate.
    """
    times = ddim_timesteps(handle.alpha_bar.shape[0], config.ddim_steps)
    shape = (batch, 3, handle.resolution, handle.resolution)
    x = torch.randn(shape, generator=make_generator(config.seed, "ddim-init"))
    ab = handle.alpha_bar

    for i, t in enumerate(times):
        with torch.no_grad():
            eps = handle.model(x, t)
        if not torch.isfinite(eps).all():
            raise NumericsError(f"non-finite noise prediction at timestep {t}")
        x0 = (x - torch.sqrt(1 - ab[t]) * eps) / torch.sqrt(ab[t])
        if config.clip_denoised:
            x0 = x0.clamp(0.0, 1.0)
        if _guide is not None:
            x0 = _guide(i, x0)
        ab_prev = ab[times[i + 1]] if i + 1 < len(times) else ab.new_tensor(1.0)
        x = torch.sqrt(ab_prev) * x0 + torch.sqrt(1 - ab_prev) * eps
    return x


def guidance_gradient(
    pair: TowerPair,
    images: torch.Tensor,
    text_embeddings: torch.Tensor,
) -> torch.Tensor:
    """Pixel gradient of the summed image-text cosine similarity.

    Accepts images at any resolution; they are bilinearly resized to the
    tower's native resolution inside the differentiable path, so the
    gradient arrives at the caller's resolution.
    """
    if images.shape[0] != text_embeddings.shape[0]:
        raise InputError("images and text embeddings disagree on batch size")
    leaf = images.detach().requires_grad_(True)
    x = leaf
    if x.shape[2] != pair.resolution or x.shape[3] != pair.resolution:
        x = F.interpolate(
            x, size=(pair.resolution, pair.resolution), mode="bilinear", align_corners=False
        )
    emb = F.normalize(pair.vision_tower(x), dim=1)
    cosine = (emb * text_embeddings).sum()
    grad = torch.autograd.grad(cosine, leaf)[0]
    if not torch.isfinite(grad).all():
        raise NumericsError("non-finite guidance gradient")
    return grad


def guided_ddim_sample(
    handle: DenoiserHandle,
    pair: TowerPair,
    texts: TextTokens,
    config: GuidanceConfig,
) -> torch.Tensor:
    """DDIM sampling steered toward the captions.

    The clean-image estimate moves once per step by ``scale`` times the
    cosine-similarity pixel gradient (scale optionally decaying linearly
    over the trajectory), then is clamped back to the pixel box.  The noise
    estimate is reused unchanged, so scale zero reproduces ``ddim_sample``
    bit for bit.
    """
    with torch.no_grad():
        txt = encode_text(pair, texts)

    def guide(i: int, x0: torch.Tensor) -> torch.Tensor:
        scale = config.scale
        if config.scale_schedule == SCALE_LINEAR_DECAY and config.ddim_steps > 1:
            scale = config.scale * (1 - i / (config.ddim_steps - 1))
        if scale == 0:
            return x0
        grad = guidance_gradient(pair, x0, txt)
        return (x0 + scale * grad).clamp(0.0, 1.0)

    return ddim_sample(handle, config, batch=len(texts), _guide=guide)


# ---------------------------------------------------------------------------
# toy denoiser fixture


class _TimeEmbedding(nn.Module):
    def __init__(self, dim: int, timesteps: int):
        super().__init__()
        self.timesteps = timesteps
        half = dim // 2
        freqs = torch.exp(-math.log(1000.0) * torch.arange(half) / max(half - 1, 1))
        self.register_buffer("freqs", freqs)
        self.mlp = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, t: int) -> torch.Tensor:
        phase = (t / self.timesteps) * self.freqs * 2 * math.pi
        enc = torch.cat([torch.sin(phase), torch.cos(phase)])
        return self.mlp(enc)


class SmallDenoiser(nn.Module):
    """Three-level UNet with additive time conditioning."""

    def __init__(self, timesteps: int, base: int = 24, time_dim: int = 48):
        super().__init__()
        self.timesteps = timesteps
        self.time = _TimeEmbedding(time_dim, timesteps)
        b = base
        self.enc1 = nn.Sequential(nn.Conv2d(3, b, 3, 1, 1), nn.GroupNorm(4, b), nn.SiLU())
        self.enc2 = nn.Sequential(nn.Conv2d(b, 2 * b, 3, 2, 1), nn.GroupNorm(4, 2 * b), nn.SiLU())
        self.enc3 = nn.Sequential(nn.Conv2d(2 * b, 4 * b, 3, 2, 1), nn.GroupNorm(4, 4 * b), nn.SiLU())
        self.t1 = nn.Linear(time_dim, b)
        self.t2 = nn.Linear(time_dim, 2 * b)
        self.t3 = nn.Linear(time_dim, 4 * b)
        self.mid = nn.Sequential(nn.Conv2d(4 * b, 4 * b, 3, 1, 1), nn.GroupNorm(4, 4 * b), nn.SiLU())
        self.up2 = nn.Sequential(nn.Conv2d(4 * b + 2 * b, 2 * b, 3, 1, 1), nn.GroupNorm(4, 2 * b), nn.SiLU())
        self.up1 = nn.Sequential(nn.Conv2d(2 * b + b, b, 3, 1, 1), nn.GroupNorm(4, b), nn.SiLU())
        self.out = nn.Conv2d(b, 3, 3, 1, 1)

    def forward(self, x: torch.Tensor, t: int) -> torch.Tensor:
        te = self.time(t)
        h1 = self.enc1(x) + self.t1(te)[None, :, None, None]
        h2 = self.enc2(h1) + self.t2(te)[None, :, None, None]
        h3 = self.enc3(h2) + self.t3(te)[None, :, None, None]
        h3 = self.mid(h3)
        u2 = F.interpolate(h3, scale_factor=2, mode="nearest")
        u2 = self.up2(torch.cat([u2, h2], dim=1))
        u1 = F.interpolate(u2, scale_factor=2, mode="nearest")
        u1 = self.up1(torch.cat([u1, h1], dim=1))
        return self.out(u1)


def train_toy_denoiser(
    images: torch.Tensor,
    timesteps: int = 200,
    steps: int = 1500,
    batch_size: int = 64,
    lr: float = 2e-3,
    seed: int = 0,
) -> DenoiserHandle:
    """Fit the fixture denoiser on a stack of clean images in [0, 1]."""
    if images.ndim != 4 or images.shape[1] != 3:
        raise InputError("denoiser training expects (N, 3, H, W) images")
    resolution = images.shape[2]
    ab = linear_alpha_bar(timesteps)
    torch.manual_seed(derive_seed(seed, "denoiser-init"))
    net = SmallDenoiser(timesteps)
    opt = torch.optim.Adam(net.parameters(), lr=lr)

    for step in range(steps):
        gen = make_generator(seed, "denoiser", step)
        idx = torch.randint(images.shape[0], (batch_size,), generator=gen)
        t = int(torch.randint(timesteps, (1,), generator=gen))
        x0 = images[idx]
        noise = torch.randn(x0.shape, generator=gen)
        x_t = torch.sqrt(ab[t]) * x0 + torch.sqrt(1 - ab[t]) * noise
        pred = net(x_t, t)
        loss = F.mse_loss(pred, noise)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()

    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    return DenoiserHandle(model=net, alpha_bar=ab, resolution=resolution)


def save_denoiser(handle: DenoiserHandle, path: str | Path) -> None:
    if not isinstance(handle.model, SmallDenoiser):
        raise ConfigError("only the toy denoiser serializes; wrap external models via DenoiserHandle")
    tensors = {name: t for name, t in handle.model.state_dict().items()}
    tensors["alpha_bar"] = handle.alpha_bar
    meta = {"resolution": handle.resolution, "timesteps": handle.model.timesteps}
    save_container(path, _KIND_DENOISER, meta, tensors)


def load_denoiser(path: str | Path) -> DenoiserHandle:
    meta, tensors = load_container(path, expect_kind=_KIND_DENOISER)
    ab = tensors.pop("alpha_bar")
    net = SmallDenoiser(int(meta["timesteps"]))
    net.load_state_dict(tensors)
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    return DenoiserHandle(model=net, alpha_bar=ab, resolution=int(meta["resolution"]))
