"""Projected gradient attacks on pixels and the adversarial contrastive loss.

Crafting runs iterated gradient ascent on an objective with the
perturbation initialized at zero, projecting onto the chosen norm ball and
re-clamping pixels to [0, 1] after every step.  Gradients are taken with
respect to pixels only; parameter gradient buffers are never touched, so a
crafting pass inside a training step cannot leak into the optimizer.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch

from mmenergy.encoders import TextTokens, TowerPair, as_image_batch, encode_image, encode_text
from mmenergy.energy import clip_contrastive_loss
from mmenergy.errors import ConfigError, NumericsError

NORM_L2 = "l2"
NORM_LINF = "linf"


@dataclass
class AdvBudget:
    """Attack budget: norm ball, radius, per-step size, and iteration count.

    ``step_size`` is in radius units for the Linf ball (each step moves
    ``step_size * epsilon`` per pixel along the gradient sign) and in
    absolute pixel-L2 units for the L2 ball (each step is the normalized
    gradient scaled by ``step_size``).
    """

    norm: str = NORM_L2
    epsilon: float = 3.0
    step_size: float = 1.5
    steps: int = 5

    def __post_init__(self) -> None:
        if self.norm not in (NORM_L2, NORM_LINF):
            raise ConfigError(f"unknown attack norm {self.norm!r}")
        if self.epsilon < 0:
            raise ConfigError("attack radius must be >= 0")
        if self.step_size <= 0:
            raise ConfigError("attack step size must be > 0")
        if self.steps < 0:
            raise ConfigError("attack step count must be >= 0")


def _project(delta: torch.Tensor, budget: AdvBudget) -> torch.Tensor:
    if budget.norm == NORM_LINF:
        return delta.clamp(-budget.epsilon, budget.epsilon)
    flat = delta.flatten(1)
    norms = flat.norm(dim=1, keepdim=True)
    factor = (budget.epsilon / norms.clamp_min(1e-12)).clamp(max=1.0)
    return (flat * factor).view_as(delta)


def perturb(
    images: torch.Tensor,
    objective: Callable[[torch.Tensor], torch.Tensor],
    budget: AdvBudget,
    on_step: Callable[[int, torch.Tensor], None] | None = None,
) -> torch.Tensor:
    """Maximize ``objective`` over the budget ball around ``images``.

    The perturbation starts at zero; each ascent step is followed by the
    norm-ball projection and the pixel box clamp, in that order, so both
    constraints hold after every iteration.  ``on_step`` sees the running
    perturbation after each iteration.  A zero radius or zero steps returns
    the input bit-exactly.
    """
    images = as_image_batch(images).detach()
    if budget.epsilon == 0 or budget.steps == 0:
        return images.clone()

    delta = torch.zeros_like(images)
    for t in range(budget.steps):
        x = (images + delta).detach().requires_grad_(True)
        value = objective(x)
        grad = torch.autograd.grad(value, x)[0]
        if not torch.isfinite(grad).all():
            raise NumericsError(f"non-finite attack gradient at step {t}")
        if budget.norm == NORM_LINF:
            step = budget.step_size * budget.epsilon * grad.sign()
        else:
            flat = grad.flatten(1)
            unit = flat / flat.norm(dim=1, keepdim=True).clamp_min(1e-12)
            step = budget.step_size * unit.view_as(grad)
        delta = _project(delta + step, budget)
        delta = (images + delta).clamp(0.0, 1.0) - images
        if on_step is not None:
            on_step(t, delta)
    return (images + delta).detach()


def craft_adversarial(
    pair: TowerPair,
    images: torch.Tensor,
    texts: TextTokens,
    budget: AdvBudget,
    seed: int = 0,
    on_step: Callable[[int, torch.Tensor], None] | None = None,
) -> torch.Tensor:
    """Ascend the contrastive loss within the budget ball around the batch.

    The attack is batch-coupled: the objective is the full symmetric
    contrastive loss, so a perturbed image trades off against every caption
    in the batch.  Text embeddings are computed once and held fixed.
    ``seed`` is part of the interface for attack variants with random
    starts; the zero-start attack used here is deterministic.
    """
    del seed
    if images.shape[0] != len(texts):
        raise ValueError("image and text batches disagree")
    with torch.no_grad():
        txt = encode_text(pair, texts)

    def objective(x: torch.Tensor) -> torch.Tensor:
        img = encode_image(pair, x)
        return clip_contrastive_loss(img, txt, pair.logit_scale)

    return perturb(images, objective, budget, on_step=on_step)


def adversarial_loss(
    pair: TowerPair,
    images: torch.Tensor,
    texts: TextTokens,
    budget: AdvBudget,
    seed: int = 0,
) -> torch.Tensor:
    """Contrastive loss evaluated at the crafted worst-case pixels.

    Crafting happens under detached parameters; the returned loss carries
    gradient to the towers through the final clean forward only.  With a
    zero radius this is exactly the clean contrastive loss.
    """
    adv_images = craft_adversarial(pair, images, texts, budget, seed=seed)
    img = encode_image(pair, adv_images)
    txt = encode_text(pair, texts)
    return clip_contrastive_loss(img, txt, pair.logit_scale)
