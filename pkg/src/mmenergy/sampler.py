"""Pixel-space sampling by adaptive gradient descent on the joint energy.

Negatives for training and images at inference both come from the same
loop: initialize pixels, then repeatedly step an AdamW-style optimizer on a
pixel-space objective.  The gradient at each step is evaluated at the
current image plus fresh Gaussian exploration noise, which first-order
expands to gradient noise and makes the update a preconditioned cousin of
Langevin dynamics.  With momentum, the adaptive denominator, noise, and
decay all switched off, one step reduces exactly to the deterministic part
of the Langevin update with twice the step size; ``sgld_step`` implements
that reference update for comparison.

Two objectives share the loop: the batch-coupled contrastive loss
(training-time negatives) and the per-pair energy sum (inference-time
generation, where each image descends its own energy independently).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import torch

import torch.nn.functional as F

from mmenergy.encoders import TextTokens, TowerPair, encode_text
from mmenergy.energy import clip_contrastive_loss
from mmenergy.errors import ConfigError, InputError, NumericsError
from mmenergy.seeding import make_generator

INIT_UNIFORM = "uniform01"
INIT_PROVIDED = "provided"

OBJECTIVE_PAIRWISE = "pairwise"      # sum of per-pair energies, decoupled gradients
OBJECTIVE_CONTRASTIVE = "contrastive"  # batch-coupled contrastive loss

_ADAPTIVE_EPS = 1e-8


@dataclass
class SamplerConfig:
    """Knobs for the pixel-space optimizer.

    Defaults are the inference flavour: no momentum, no exploration noise.
    Training-time negative sampling turns both on (momentum 0.9, small
    noise) via the trainer config.
    """

    steps: int = 50
    step_size: float = 0.025
    momentum_beta1: float = 0.0
    adaptive_beta2: float = 0.999
    adaptive: bool = True          # divide by the running gradient scale
    weight_decay: float = 0.0
    noise_scale: float = 0.0       # std of the exploration noise added before the gradient
    clamp: bool = True
    init: str = INIT_UNIFORM
    seed: int = 0

    def __post_init__(self) -> None:
        if self.steps < 0:
            raise ConfigError("sampler steps must be >= 0")
        if self.step_size <= 0:
            raise ConfigError("sampler step size must be > 0")
        if not (0.0 <= self.momentum_beta1 < 1.0):
            raise ConfigError("momentum_beta1 must lie in [0, 1)")
        if not (0.0 <= self.adaptive_beta2 < 1.0):
            raise ConfigError("adaptive_beta2 must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.noise_scale < 0:
            raise ConfigError("noise_scale must be >= 0")
        if self.init not in (INIT_UNIFORM, INIT_PROVIDED):
            raise ConfigError(f"unknown init mode {self.init!r}")


@dataclass
class SampleTrace:
    """Final images plus the per-step mean pair energy.

    ``energy_trace`` has ``steps + 1`` entries: the energy at the point each
    gradient was taken (the pre-update image, including exploration noise
    when enabled) followed by one clean evaluation of the final images.
    """

    final: torch.Tensor
    energy_trace: list[float]
    seed: int


def draw_initial(
    shape: tuple[int, ...],
    init: str = INIT_UNIFORM,
    seed: int = 0,
    provided: torch.Tensor | None = None,
) -> torch.Tensor:
    """Initial pixels: seeded Uniform[0, 1], or the caller's tensor unchanged."""
    if init == INIT_UNIFORM:
        return torch.rand(shape, generator=make_generator(seed, "init"))
    if init == INIT_PROVIDED:
        if provided is None:
            raise InputError("init='provided' needs an initial tensor")
        if tuple(provided.shape) != tuple(shape):
            raise InputError(
                f"provided init shape {tuple(provided.shape)} != requested {tuple(shape)}"
            )
        return provided
    raise ConfigError(f"unknown init mode {init!r}")


def _embed_states(pair: TowerPair, states: torch.Tensor) -> torch.Tensor:
    """Image-tower forward without the [0, 1] box check.

    Intermediate sampler states (noise probes, unclamped trajectories) live
    slightly outside the pixel box by design; they are optimizer states, not
    images, so only the shape contract is enforced here.
    """
    if states.ndim != 4 or states.shape[1] != 3:
        raise InputError(f"sampler state must be (B, 3, H, W), got {tuple(states.shape)}")
    if states.shape[2] != pair.resolution or states.shape[3] != pair.resolution:
        raise ConfigError(
            f"state resolution {tuple(states.shape[2:])} does not match tower "
            f"resolution {pair.resolution}"
        )
    return F.normalize(pair.vision_tower(states), dim=1)


def generate(
    pair: TowerPair,
    texts: TextTokens,
    config: SamplerConfig,
    objective: str = OBJECTIVE_PAIRWISE,
    initial: torch.Tensor | None = None,
) -> SampleTrace:
    """Descend the chosen objective from the initial pixels.

    Tower parameters are read, never written; all randomness comes from
    ``config.seed``.  Zero steps returns the initial pixels with a single
    energy reading.
    """
    if objective not in (OBJECTIVE_PAIRWISE, OBJECTIVE_CONTRASTIVE):
        raise ConfigError(f"unknown sampler objective {objective!r}")
    batch = len(texts)
    shape = (batch, 3, pair.resolution, pair.resolution)
    x = draw_initial(shape, config.init, config.seed, provided=initial).clone()

    with torch.no_grad():
        txt = encode_text(pair, texts)

    noise_gen = make_generator(config.seed, "noise")
    momentum = torch.zeros_like(x)
    second_moment = torch.zeros_like(x)
    energies: list[float] = []

    for t in range(1, config.steps + 1):
        probe = x
        if config.noise_scale > 0:
            probe = x + config.noise_scale * torch.randn(
                x.shape, generator=noise_gen
            )
        leaf = probe.detach().requires_grad_(True)
        img = _embed_states(pair, leaf)
        cosines = (img * txt).sum(dim=1)
        energies.append(float(-cosines.detach().mean()))
        if objective == OBJECTIVE_PAIRWISE:
            value = -cosines.sum()
        else:
            value = clip_contrastive_loss(img, txt, pair.logit_scale)
        grad = torch.autograd.grad(value, leaf)[0]
        if not torch.isfinite(grad).all():
            raise NumericsError(f"non-finite pixel gradient at sampler step {t}")

        momentum = config.momentum_beta1 * momentum + (1 - config.momentum_beta1) * grad
        m_hat = momentum / (1 - config.momentum_beta1 ** t)
        if config.weight_decay > 0:
            x = x - config.step_size * config.weight_decay * x
        if config.adaptive:
            second_moment = (
                config.adaptive_beta2 * second_moment
                + (1 - config.adaptive_beta2) * grad * grad
            )
            v_hat = second_moment / (1 - config.adaptive_beta2 ** t)
            x = x - config.step_size * m_hat / (v_hat.sqrt() + _ADAPTIVE_EPS)
        else:
            x = x - config.step_size * m_hat
        if config.clamp:
            x = x.clamp(0.0, 1.0)

    with torch.no_grad():
        final_energy = float(-(_embed_states(pair, x) * txt).sum(dim=1).mean())
    energies.append(final_energy)
    return SampleTrace(final=x.detach(), energy_trace=energies, seed=config.seed)


def sgld_step(
    energy_fn: Callable[[torch.Tensor], torch.Tensor],
    x: torch.Tensor,
    step_size: float,
    seed: int = 0,
    noise: torch.Tensor | None = None,
) -> torch.Tensor:
    """One Langevin update: x - (a/2) dE/dx + n with n ~ N(0, a I).

    ``noise`` overrides the draw (pass zeros for the deterministic part).
    """
    if step_size <= 0:
        raise ConfigError("langevin step size must be > 0")
    leaf = x.detach().requires_grad_(True)
    value = energy_fn(leaf)
    if value.ndim != 0:
        raise InputError("energy_fn must return a scalar")
    grad = torch.autograd.grad(value, leaf)[0]
    if noise is None:
        noise = (step_size ** 0.5) * torch.randn(
            x.shape, generator=make_generator(seed, "sgld")
        )
    if tuple(noise.shape) != tuple(x.shape):
        raise InputError("noise shape must match state shape")
    return (x - 0.5 * step_size * grad + noise).detach()


@dataclass
class TaylorNoiseReport:
    """Residuals of the first-order expansion of a noised gradient.

    ``residual`` is the worst max-norm gap between the exact gradient at a
    perturbed point and its linearization, over the sampled directions;
    ``residual_half`` repeats this with the same directions at half the
    scale.  For an energy with bounded third derivatives the ratio tends to
    four as the scale shrinks; for a quadratic both residuals vanish.
    """

    noise_scale: float
    residual: float
    residual_half: float
    samples: int
    ratio: float = field(init=False)

    def __post_init__(self) -> None:
        self.ratio = (
            self.residual / self.residual_half if self.residual_half > 0 else float("nan")
        )


def taylor_noise_check(
    energy_fn: Callable[[torch.Tensor], torch.Tensor],
    x: torch.Tensor,
    noise_scale: float,
    samples: int = 32,
    seed: int = 0,
) -> TaylorNoiseReport:
    """Measure how well grad E(x + e) matches grad E(x) + H(x) e.

    ``x`` must be a flat vector small enough to build the dense Hessian.
    A zero noise scale reports exactly zero residuals.
    """
    if x.ndim != 1:
        raise InputError("taylor check expects a flat state vector")
    if noise_scale < 0:
        raise InputError("noise scale must be >= 0")
    x = x.detach()

    def grad_at(point: torch.Tensor) -> torch.Tensor:
        leaf = point.detach().requires_grad_(True)
        return torch.autograd.grad(energy_fn(leaf), leaf)[0]

    base_grad = grad_at(x)
    hessian = torch.autograd.functional.hessian(energy_fn, x)
    directions = torch.randn(
        (samples, x.shape[0]), generator=make_generator(seed, "taylor"), dtype=x.dtype
    )

    def worst_residual(scale: float) -> float:
        if scale == 0:
            return 0.0
        worst = 0.0
        for direction in directions:
            eps = scale * direction
            exact = grad_at(x + eps)
            linear = base_grad + hessian @ eps
            worst = max(worst, float((exact - linear).abs().max()))
        return worst

    return TaylorNoiseReport(
        noise_scale=noise_scale,
        residual=worst_residual(noise_scale),
        residual_half=worst_residual(noise_scale / 2),
        samples=samples,
    )
