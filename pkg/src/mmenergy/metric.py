"""Alignment scoring and its robustness probes.

The score of a pair is the cosine similarity of its embeddings (the negated
joint energy).  Two probes measure how fragile that score is:

* ``attacked_score`` reruns scoring after a PGD attack that directly pushes
  the scores up or down inside a small pixel budget; a robust scorer moves
  little.
* ``blend_curve`` scores convex blends of each image with one fixed uniform
  noise draw; a sane scorer degrades monotonically as the image dissolves.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import torch

from mmenergy import __version__
from mmenergy.adversarial import NORM_LINF, AdvBudget, perturb
from mmenergy.encoders import TextTokens, TowerPair, as_image_batch, encode_image, encode_text
from mmenergy.errors import InputError, NumericsError
from mmenergy.seeding import make_generator

DIRECTION_INCREASE = "increase"
DIRECTION_DECREASE = "decrease"


@dataclass
class ScoreReport:
    """Per-pair cosine scores plus how they were produced."""

    per_pair: list[float]
    mean: float
    provenance: dict


@dataclass
class BlendCurve:
    """Mean scores along the noise-to-image blend.

    Blend weight 0 is pure noise and 1 is the clean image.  ``normalized``
    divides every mean score by the pure-noise value, making the curve
    exactly 1.0 at weight 0; rank statistics should use ``raw`` directly,
    since dividing by a negative anchor would flip them.
    """

    lambdas: list[float]
    raw: list[float]
    normalized: list[float]
    seed: int


def default_attack_budget() -> AdvBudget:
    """Small perceptually-invisible budget used by the robustness probe."""
    return AdvBudget(norm=NORM_LINF, epsilon=2.0 / 255.0, step_size=0.25, steps=10)


def score(pair: TowerPair, images: torch.Tensor, texts: TextTokens) -> ScoreReport:
    """Cosine similarity per matched pair."""
    if images.shape[0] != len(texts):
        raise InputError("images and texts disagree on batch size")
    with torch.no_grad():
        img = encode_image(pair, images)
        txt = encode_text(pair, texts)
        cosines = (img * txt).sum(dim=1)
    values = [float(v) for v in cosines]
    return ScoreReport(
        per_pair=values,
        mean=sum(values) / len(values),
        provenance={"kind": "clean", "version": __version__, "pairs": len(values)},
    )


def attacked_score(
    pair: TowerPair,
    images: torch.Tensor,
    texts: TextTokens,
    direction: str = DIRECTION_DECREASE,
    budget: AdvBudget | None = None,
) -> ScoreReport:
    """Score after a PGD attack aimed straight at the scores.

    ``direction`` picks whether the attack inflates or deflates them.  A
    zero-radius budget reproduces the clean scores bit for bit.
    """
    if direction not in (DIRECTION_INCREASE, DIRECTION_DECREASE):
        raise InputError(f"unknown attack direction {direction!r}")
    budget = budget if budget is not None else default_attack_budget()
    sign = 1.0 if direction == DIRECTION_INCREASE else -1.0
    with torch.no_grad():
        txt = encode_text(pair, texts)

    def objective(x: torch.Tensor) -> torch.Tensor:
        img = encode_image(pair, x)
        return sign * (img * txt).sum()

    attacked = perturb(images, objective, budget)
    report = score(pair, attacked, texts)
    report.provenance = {
        "kind": "attacked",
        "version": __version__,
        "pairs": len(report.per_pair),
        "direction": direction,
        "norm": budget.norm,
        "epsilon": budget.epsilon,
        "step_size": budget.step_size,
        "steps": budget.steps,
    }
    return report


def blend_curve(
    pair: TowerPair,
    images: torch.Tensor,
    texts: TextTokens,
    lambdas: list[float],
    seed: int = 0,
) -> BlendCurve:
    """Mean score of lam * image + (1 - lam) * noise across blend weights.

    One uniform noise image is drawn per input and shared across every
    blend weight, so the curve varies only through the blending.  The grid
    must include 0 (pure noise, the normalization anchor); weights outside
    [0, 1] are rejected.
    """
    images = as_image_batch(images)
    if not lambdas:
        raise InputError("empty blend grid")
    if any(lam < 0 or lam > 1 for lam in lambdas):
        raise InputError("blend weights must lie in [0, 1]")
    if not any(abs(lam) < 1e-12 for lam in lambdas):
        raise InputError("blend grid must include 0, the normalization anchor")

    noise = torch.rand(images.shape, generator=make_generator(seed, "blend"))
    raw = []
    for lam in lambdas:
        blended = lam * images + (1 - lam) * noise
        raw.append(score(pair, blended, texts).mean)

    anchor = raw[next(i for i, lam in enumerate(lambdas) if abs(lam) < 1e-12)]
    if anchor == 0:
        raise NumericsError("score at the pure-noise anchor is zero; cannot normalize")
    normalized = [v / anchor for v in raw]
    return BlendCurve(lambdas=list(lambdas), raw=raw, normalized=normalized, seed=seed)


# ---------------------------------------------------------------------------
# report files


def write_score_csv(report: ScoreReport, path: str | Path) -> None:
    """CSV of per-pair scores behind a JSON provenance header."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write("# " + json.dumps(report.provenance, sort_keys=True) + "\n")
        writer = csv.writer(fh)
        writer.writerow(["pair", "score"])
        for i, value in enumerate(report.per_pair):
            writer.writerow([i, f"{value:.8f}"])
        writer.writerow(["mean", f"{report.mean:.8f}"])


def write_blend_csv(curve: BlendCurve, provenance: dict, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write("# " + json.dumps({**provenance, "seed": curve.seed}, sort_keys=True) + "\n")
        writer = csv.writer(fh)
        writer.writerow(["lambda", "raw_score", "normalized_score"])
        for lam, r, n in zip(curve.lambdas, curve.raw, curve.normalized):
            writer.writerow([f"{lam:.6f}", f"{r:.8f}", f"{n:.8f}"])
