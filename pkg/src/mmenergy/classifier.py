"""Frozen shape-and-color classifier used as an independent judge.

Generated images are scored by this classifier, which never shares weights
or training with the encoder towers.  It trains on fresh renders with heavy
pixel augmentation (noise, blur, brightness and contrast jitter) so that
blobby generator output still gets judged by its dominant color and shape
rather than by clean-edge artifacts.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from mmenergy.data import (
    DEFAULT_COLORS,
    DEFAULT_SHAPES,
    DatasetSpec,
    caption_to_labels,
    render_class_batch,
)
from mmenergy.encoders import as_image_batch
from mmenergy.seeding import derive_seed, make_generator
from mmenergy.serialize import load_container, save_container

_KIND = "classifier"


class ShapeColorNet(nn.Module):
    """Conv trunk with two linear heads: color logits and shape logits."""

    def __init__(self, n_colors: int = len(DEFAULT_COLORS), n_shapes: int = len(DEFAULT_SHAPES)):
        super().__init__()
        self.trunk = nn.Sequential(
            nn.Conv2d(3, 24, 3, 1, 1), nn.GroupNorm(4, 24), nn.SiLU(),
            nn.Conv2d(24, 48, 3, 2, 1), nn.GroupNorm(4, 48), nn.SiLU(),
            nn.Conv2d(48, 96, 3, 2, 1), nn.GroupNorm(4, 96), nn.SiLU(),
            nn.AdaptiveAvgPool2d(1), nn.Flatten(),
        )
        self.color_head = nn.Linear(96, n_colors)
        self.shape_head = nn.Linear(96, n_shapes)

    def forward(self, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = self.trunk(images)
        return self.color_head(h), self.shape_head(h)


@dataclass
class OracleClassifier:
    net: ShapeColorNet
    resolution: int

    def classify(self, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Predicted (color index, shape index) per image."""
        images = as_image_batch(images)
        with torch.no_grad():
            color_logits, shape_logits = self.net(images)
        return color_logits.argmax(dim=1), shape_logits.argmax(dim=1)

    def agreement(self, images: torch.Tensor, captions: list[str]) -> float:
        """Fraction of images whose predicted color and shape both match."""
        color_pred, shape_pred = self.classify(images)
        hits = 0
        for i, caption in enumerate(captions):
            color_idx, shape_idx = caption_to_labels(caption)
            hits += int(color_pred[i] == color_idx and shape_pred[i] == shape_idx)
        return hits / len(captions)


def _augment(images: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    """Noise, blur, and photometric jitter, all drawn from ``gen``."""
    b = images.shape[0]
    out = images
    # brightness / contrast jitter
    gain = 1.0 + 0.25 * (2 * torch.rand((b, 1, 1, 1), generator=gen) - 1)
    bias = 0.12 * (2 * torch.rand((b, 1, 1, 1), generator=gen) - 1)
    out = out * gain + bias
    # box blur on a random subset
    blur_mask = torch.rand((b,), generator=gen) < 0.5
    if blur_mask.any():
        blurred = F.avg_pool2d(out[blur_mask], 3, stride=1, padding=1)
        out = out.clone()
        out[blur_mask] = blurred
    # additive gaussian noise with per-image scale
    sigma = 0.18 * torch.rand((b, 1, 1, 1), generator=gen)
    out = out + sigma * torch.randn(out.shape, generator=gen)
    return out.clamp(0.0, 1.0)


def train_oracle_classifier(
    resolution: int = 32,
    steps: int = 1200,
    batch_size: int = 64,
    lr: float = 2e-3,
    seed: int = 0,
) -> OracleClassifier:
    """Train the judge on an endless stream of fresh augmented renders."""
    net = ShapeColorNet()
    torch.manual_seed(derive_seed(seed, "classifier-init"))
    for m in net.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
            nn.init.zeros_(m.bias)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    spec = DatasetSpec(count=batch_size, resolution=resolution)
    colors = list(DEFAULT_COLORS)
    shapes = list(DEFAULT_SHAPES)

    for step in range(steps):
        gen = make_generator(seed, "classifier", step)
        color_idx = torch.randint(len(colors), (batch_size,), generator=gen)
        shape_idx = torch.randint(len(shapes), (batch_size,), generator=gen)
        labels = [(colors[c], shapes[s]) for c, s in zip(color_idx, shape_idx)]
        images = render_class_batch(spec, labels, derive_seed(seed, "classifier-render", step))
        images = _augment(images, gen)
        color_logits, shape_logits = net(images)
        loss = F.cross_entropy(color_logits, color_idx) + F.cross_entropy(
            shape_logits, shape_idx
        )
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()

    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    return OracleClassifier(net=net, resolution=resolution)


def save_classifier(clf: OracleClassifier, path: str | Path) -> None:
    tensors = {name: t for name, t in clf.net.state_dict().items()}
    save_container(path, _KIND, {"resolution": clf.resolution}, tensors)


def load_classifier(path: str | Path) -> OracleClassifier:
    meta, tensors = load_container(path, expect_kind=_KIND)
    net = ShapeColorNet()
    net.load_state_dict(tensors)
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    return OracleClassifier(net=net, resolution=int(meta["resolution"]))
