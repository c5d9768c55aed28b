"""Joint image-text energy and the contrastive losses built on it.

The energy of a pair is the negative cosine similarity of its embeddings,
so matched pairs sit low and mismatched pairs sit high.  Two losses share
this geometry:

* ``clip_contrastive_loss``: the symmetric two-direction cross-entropy over
  a square batch similarity matrix (the usual two-tower pretraining loss).
* ``contrastive_energy_loss``: a text-anchored cross-entropy over a
  rectangular matrix whose columns hold the batch positives followed by
  sampled negatives; each text row must pick out its own positive.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from mmenergy.encoders import TextTokens, TowerPair, encode_image, encode_text
from mmenergy.errors import ConfigError, InputError, NumericsError

_ENTRY_TOL = 1e-4  # float32 cosine rounding allowance on |entry| <= 1


@dataclass
class EnergyMatrix:
    """Cosine similarities of every text row against positives then negatives.

    ``values[k, j]`` is the cosine of text ``k`` with image column ``j``;
    columns ``[0, positive_count)`` are the batch positives in text order, so
    column ``k`` is the matched positive for row ``k``.  Energies are the
    negated entries.
    """

    values: torch.Tensor
    positive_count: int

    def __post_init__(self) -> None:
        if self.values.ndim != 2:
            raise InputError("energy matrix must be 2-D")
        rows, cols = self.values.shape
        if self.positive_count != rows:
            raise InputError(
                f"positive_count {self.positive_count} must equal text rows {rows}"
            )
        if cols < self.positive_count:
            raise InputError("fewer columns than declared positives")
        if not torch.isfinite(self.values).all():
            raise NumericsError("energy matrix contains non-finite entries")
        if self.values.abs().max() > 1 + _ENTRY_TOL:
            raise NumericsError("cosine similarity entry outside [-1, 1]")

    @property
    def negative_count(self) -> int:
        return self.values.shape[1] - self.positive_count

    def positive_energies(self) -> torch.Tensor:
        """Energy of each matched (text, positive) pair: minus the diagonal."""
        idx = torch.arange(self.positive_count)
        return -self.values[idx, idx]

    def matched_negative_energies(self) -> torch.Tensor:
        """Energy of each text against the negative generated for it."""
        if self.negative_count != self.positive_count:
            raise InputError("matched negatives need negative_count == positive_count")
        idx = torch.arange(self.positive_count)
        return -self.values[idx, self.positive_count + idx]


def joint_energy(pair: TowerPair, images: torch.Tensor, texts: TextTokens) -> torch.Tensor:
    """Per-pair energy: negative cosine similarity, shape (B,), values in [-1, 1]."""
    if images.shape[0] != len(texts):
        raise InputError(
            f"image batch {images.shape[0]} and text batch {len(texts)} disagree"
        )
    img = encode_image(pair, images)
    txt = encode_text(pair, texts)
    return -(img * txt).sum(dim=1)


def build_energy_matrix(
    pair: TowerPair,
    positives: torch.Tensor,
    negatives: torch.Tensor,
    texts: TextTokens,
) -> EnergyMatrix:
    """Embed positives and negatives in one forward and cross them with texts."""
    if positives.shape[0] != len(texts):
        raise InputError("positives must align one-to-one with texts")
    if negatives.shape[1:] != positives.shape[1:]:
        raise InputError("negatives and positives disagree on image shape")
    images = torch.cat([positives, negatives], dim=0)
    img = encode_image(pair, images)
    txt = encode_text(pair, texts)
    values = txt @ img.t()
    return EnergyMatrix(values=values, positive_count=positives.shape[0])


def contrastive_energy_loss(matrix: EnergyMatrix, logit_scale: torch.Tensor | float) -> torch.Tensor:
    """Mean text-anchored cross-entropy: row k must select positive column k.

    With every entry equal the loss is ``log(columns)``; it tends to zero as
    the matched similarities dominate, and is bounded below by zero.
    """
    scale = _check_scale(logit_scale)
    logits = scale * matrix.values
    targets = torch.arange(matrix.positive_count, device=logits.device)
    loss = F.cross_entropy(logits, targets)
    if not torch.isfinite(loss):
        raise NumericsError("contrastive energy loss is non-finite")
    return loss


def clip_contrastive_loss(
    image_embeddings: torch.Tensor,
    text_embeddings: torch.Tensor,
    logit_scale: torch.Tensor | float,
) -> torch.Tensor:
    """Symmetric contrastive loss over the square batch similarity matrix.

    Mean of the image-to-text and text-to-image cross-entropies with the
    diagonal as ground truth.  A batch of one matched pair scores zero.
    """
    if image_embeddings.shape != text_embeddings.shape:
        raise InputError("embedding batches must share shape")
    if image_embeddings.ndim != 2:
        raise InputError("embeddings must be (B, D)")
    scale = _check_scale(logit_scale)
    logits = scale * image_embeddings @ text_embeddings.t()
    targets = torch.arange(logits.shape[0], device=logits.device)
    loss = 0.5 * (F.cross_entropy(logits, targets) + F.cross_entropy(logits.t(), targets))
    if not torch.isfinite(loss):
        raise NumericsError("contrastive loss is non-finite")
    return loss


def _check_scale(logit_scale: torch.Tensor | float):
    value = logit_scale.detach() if isinstance(logit_scale, torch.Tensor) else logit_scale
    if float(value) <= 0:
        raise ConfigError("logit_scale must be positive")
    return logit_scale
