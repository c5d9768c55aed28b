"""Two-tower image-text encoder with unit-norm embeddings.

The image tower maps float pixel batches in [0, 1] to L2-normalized
embeddings; the text tower does the same for tokenized captions.  The text
tower and the similarity temperature (``logit_scale``) are frozen by
default: training updates the image tower only.

A small convolutional/embedding pair ships as the toy architecture so the
whole pipeline runs on CPU in minutes.  Checkpoints use the binary container
from :mod:`mmenergy.serialize`; an adapter manifest format is provided for
importing externally trained weights into the same layout.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from mmenergy.errors import CheckpointError, ConfigError, InputError
from mmenergy.seeding import make_generator

MAX_CAPTION_TOKENS = 8
PAD_TOKEN = "<pad>"


# ---------------------------------------------------------------------------
# tokenization


class Vocabulary:
    """Whitespace word vocabulary with a reserved pad id 0."""

    def __init__(self, words: list[str]):
        if len(words) != len(set(words)):
            raise ConfigError("vocabulary words must be unique")
        if PAD_TOKEN in words:
            raise ConfigError(f"{PAD_TOKEN!r} is reserved")
        self.words = [PAD_TOKEN] + list(words)
        self._ids = {w: i for i, w in enumerate(self.words)}

    def __len__(self) -> int:
        return len(self.words)

    def encode(self, captions: list[str], max_len: int = MAX_CAPTION_TOKENS) -> "TextTokens":
        """Tokenize captions to padded id tensors.  Unknown words are input errors."""
        if not captions:
            raise InputError("empty caption batch")
        rows = []
        lengths = []
        for caption in captions:
            words = caption.lower().split()
            if not words:
                raise InputError(f"caption {caption!r} has no tokens")
            if len(words) > max_len:
                raise InputError(f"caption {caption!r} exceeds {max_len} tokens")
            try:
                ids = [self._ids[w] for w in words]
            except KeyError as exc:
                raise InputError(f"caption {caption!r}: unknown word {exc.args[0]!r}") from exc
            lengths.append(len(ids))
            rows.append(ids + [0] * (max_len - len(ids)))
        return TextTokens(
            ids=torch.tensor(rows, dtype=torch.long),
            lengths=torch.tensor(lengths, dtype=torch.long),
        )


@dataclass
class TextTokens:
    """Padded token id batch: ids (B, L) with pad id 0, lengths (B,)."""

    ids: torch.Tensor
    lengths: torch.Tensor

    def __post_init__(self) -> None:
        if self.ids.ndim != 2 or self.lengths.ndim != 1:
            raise InputError("token ids must be (B, L), lengths (B,)")
        if self.ids.shape[0] != self.lengths.shape[0]:
            raise InputError("token ids and lengths disagree on batch size")
        if self.ids.shape[0] == 0:
            raise InputError("empty token batch")
        if (self.lengths < 1).any() or (self.lengths > self.ids.shape[1]).any():
            raise InputError("token lengths out of range")
        if (self.ids < 0).any():
            raise InputError("negative token id")

    def __len__(self) -> int:
        return int(self.ids.shape[0])

    def take(self, index) -> "TextTokens":
        """Sub-batch by python slice or index tensor."""
        return TextTokens(ids=self.ids[index], lengths=self.lengths[index])


def as_image_batch(images: torch.Tensor) -> torch.Tensor:
    """Validate a pixel batch: float (B, 3, H, W), finite, values in [0, 1]."""
    if not isinstance(images, torch.Tensor):
        raise InputError("image batch must be a tensor")
    if images.ndim != 4 or images.shape[1] != 3:
        raise InputError(f"image batch must be (B, 3, H, W), got {tuple(images.shape)}")
    if images.shape[0] == 0:
        raise InputError("empty image batch")
    if not images.dtype.is_floating_point:
        raise InputError(f"image batch must be floating point, got {images.dtype}")
    if not torch.isfinite(images).all():
        raise InputError("image batch contains non-finite values")
    if images.min() < -1e-6 or images.max() > 1 + 1e-6:
        raise InputError("image batch values outside [0, 1]")
    return images


# ---------------------------------------------------------------------------
# toy towers


class ToyVisionTower(nn.Module):
    """Small conv stack with GroupNorm and SiLU, global pooling, linear head.

    GroupNorm keeps every sample independent of its batch neighbours, which
    the per-pair pixel gradients in the sampler and the determinism tests
    rely on.  SiLU keeps the map smooth for finite-difference checks.
    """

    def __init__(self, resolution: int, embed_dim: int, widths: tuple[int, int, int] = (16, 32, 64)):
        super().__init__()
        if resolution < 8:
            raise ConfigError("vision tower needs resolution >= 8")
        w1, w2, w3 = widths
        self.resolution = resolution
        self.embed_dim = embed_dim
        self.trunk = nn.Sequential(
            nn.Conv2d(3, w1, 3, 1, 1), nn.GroupNorm(4, w1), nn.SiLU(),
            nn.Conv2d(w1, w2, 3, 2, 1), nn.GroupNorm(4, w2), nn.SiLU(),
            nn.Conv2d(w2, w3, 3, 2, 1), nn.GroupNorm(4, w3), nn.SiLU(),
            nn.Conv2d(w3, w3, 3, 2, 1), nn.GroupNorm(4, w3), nn.SiLU(),
        )
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.head = nn.Linear(w3, embed_dim)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        h = self.trunk(images)
        h = self.pool(h).flatten(1)
        return self.head(h)


class ToyTextTower(nn.Module):
    """Mean of word embeddings followed by a linear projection."""

    def __init__(self, vocab_size: int, embed_dim: int, hidden: int = 64):
        super().__init__()
        self.embed_dim = embed_dim
        self.table = nn.Embedding(vocab_size, hidden, padding_idx=0)
        self.head = nn.Linear(hidden, embed_dim)

    def forward(self, tokens: TextTokens) -> torch.Tensor:
        emb = self.table(tokens.ids)
        mask = (
            torch.arange(tokens.ids.shape[1], device=emb.device)[None, :]
            < tokens.lengths[:, None]
        )
        pooled = (emb * mask[..., None].to(emb.dtype)).sum(1) / tokens.lengths[:, None].to(emb.dtype)
        return self.head(pooled)


@dataclass
class TowerPair:
    """Image tower, text tower, temperature, and the shared vocabulary.

    ``logit_scale`` is a 0-dim tensor so it serializes bit-exactly.  The text
    tower is frozen on construction; ``logit_scale`` is frozen unless the
    training config opts in.
    """

    vision_tower: nn.Module
    text_tower: nn.Module
    logit_scale: torch.Tensor
    vocab: Vocabulary
    resolution: int
    embed_dim: int

    def __post_init__(self) -> None:
        if float(self.logit_scale) <= 0:
            raise ConfigError("logit_scale must be positive")
        for p in self.text_tower.parameters():
            p.requires_grad_(False)


@dataclass
class ToyTowerConfig:
    resolution: int = 32
    embed_dim: int = 64
    logit_scale: float = 10.0
    seed: int = 0
    vocab_words: list[str] = field(default_factory=list)  # empty selects the dataset default


def _init_module(module: nn.Module, gen: torch.Generator) -> None:
    """Re-initialize parameters from an explicit generator.

    Module constructors draw from torch's global RNG; re-drawing here makes
    tower creation a pure function of the config seed.
    """
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight.shape[1] * (m.weight[0, 0].numel() if m.weight.ndim > 2 else 1)
            bound = 1.0 / float(fan_in) ** 0.5
            with torch.no_grad():
                m.weight.uniform_(-bound, bound, generator=gen)
                if m.bias is not None:
                    m.bias.uniform_(-bound, bound, generator=gen)
        elif isinstance(m, nn.Embedding):
            with torch.no_grad():
                m.weight.normal_(0.0, 1.0, generator=gen)
                if m.padding_idx is not None:
                    m.weight[m.padding_idx].zero_()


def make_toy_towers(config: ToyTowerConfig) -> TowerPair:
    """Build the toy pair deterministically from its config."""
    from mmenergy.data import default_vocab_words  # vocabulary shared with the dataset

    words = list(config.vocab_words) or default_vocab_words()
    vocab = Vocabulary(words)
    vision = ToyVisionTower(config.resolution, config.embed_dim)
    text = ToyTextTower(len(vocab), config.embed_dim)
    _init_module(vision, make_generator(config.seed, "vision-init"))
    _init_module(text, make_generator(config.seed, "text-init"))
    pair = TowerPair(
        vision_tower=vision,
        text_tower=text,
        logit_scale=torch.tensor(float(config.logit_scale)),
        vocab=vocab,
        resolution=config.resolution,
        embed_dim=config.embed_dim,
    )
    return pair


# ---------------------------------------------------------------------------
# encoding


def encode_image(pair: TowerPair, images: torch.Tensor) -> torch.Tensor:
    """Embed a pixel batch; rows come back unit-norm."""
    images = as_image_batch(images)
    if images.shape[2] != pair.resolution or images.shape[3] != pair.resolution:
        raise ConfigError(
            f"image resolution {tuple(images.shape[2:])} does not match tower "
            f"resolution {pair.resolution}"
        )
    raw = pair.vision_tower(images)
    return F.normalize(raw, dim=1)


def encode_text(pair: TowerPair, tokens: TextTokens) -> torch.Tensor:
    """Embed a token batch; rows come back unit-norm."""
    if int(tokens.ids.max()) >= len(pair.vocab):
        raise InputError("token id outside vocabulary range")
    raw = pair.text_tower(tokens)
    return F.normalize(raw, dim=1)


# ---------------------------------------------------------------------------
# checkpoints

_KIND_TOWERS = "towers"


def _tower_meta(pair: TowerPair) -> dict:
    return {
        "resolution": pair.resolution,
        "embed_dim": pair.embed_dim,
        "vocab": pair.vocab.words[1:],  # pad token is implicit
        "text_frozen": True,
    }


def _tower_tensors(pair: TowerPair) -> dict[str, torch.Tensor]:
    tensors: dict[str, torch.Tensor] = {}
    for name, t in pair.vision_tower.state_dict().items():
        tensors[f"vision.{name}"] = t
    for name, t in pair.text_tower.state_dict().items():
        tensors[f"text.{name}"] = t
    tensors["logit_scale"] = pair.logit_scale.reshape(())
    return tensors


def save_checkpoint(pair: TowerPair, path: str | Path) -> None:
    from mmenergy.serialize import save_container

    save_container(path, _KIND_TOWERS, _tower_meta(pair), _tower_tensors(pair))


def load_checkpoint(path: str | Path) -> TowerPair:
    """Rebuild a toy tower pair from a container file, bit-exact."""
    from mmenergy.serialize import load_container

    meta, tensors = load_container(path, expect_kind=_KIND_TOWERS)
    pair = make_toy_towers(
        ToyTowerConfig(
            resolution=int(meta["resolution"]),
            embed_dim=int(meta["embed_dim"]),
            vocab_words=list(meta["vocab"]),
        )
    )
    _load_tower_tensors(pair, tensors, source=str(path))
    return pair


def _load_tower_tensors(pair: TowerPair, tensors: dict[str, torch.Tensor], source: str) -> None:
    vision_state = {}
    text_state = {}
    for name, t in tensors.items():
        if name.startswith("vision."):
            vision_state[name[len("vision."):]] = t
        elif name.startswith("text."):
            text_state[name[len("text."):]] = t
        elif name == "logit_scale":
            with torch.no_grad():
                pair.logit_scale.copy_(t.reshape(()))
        else:
            raise CheckpointError(f"{source}: unexpected tensor {name!r}")
    try:
        pair.vision_tower.load_state_dict(vision_state)
        pair.text_tower.load_state_dict(text_state)
    except RuntimeError as exc:
        raise CheckpointError(f"{source}: tensor mismatch: {exc}") from exc
    for p in pair.text_tower.parameters():
        p.requires_grad_(False)


# ---------------------------------------------------------------------------
# external weight import

def export_adapter_manifest(pair: TowerPair, directory: str | Path) -> Path:
    """Write weights as one .npz plus a JSON manifest mapping names to keys.

    The manifest is the declared interface for bringing externally trained
    two-tower weights into this package: architecture block plus an explicit
    parameter-name mapping, no implicit discovery.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensors = _tower_tensors(pair)
    arrays = {name: t.detach().cpu().numpy() for name, t in tensors.items()}
    np.savez(directory / "weights.npz", **arrays)
    manifest = {
        "architecture": "toy",
        "resolution": pair.resolution,
        "embed_dim": pair.embed_dim,
        "vocab": pair.vocab.words[1:],
        "weights_file": "weights.npz",
        "mapping": {name: name for name in tensors},
    }
    manifest_path = directory / "tower_manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest_path


def import_adapter_manifest(manifest_path: str | Path) -> TowerPair:
    """Load a tower pair through the adapter manifest."""
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read manifest {manifest_path}: {exc}") from exc
    if manifest.get("architecture") != "toy":
        raise ConfigError(
            f"unknown architecture {manifest.get('architecture')!r}; "
            "this build ships the toy architecture only"
        )
    arrays = np.load(manifest_path.parent / manifest["weights_file"])
    tensors = {}
    for canonical, key in manifest["mapping"].items():
        if key not in arrays:
            raise CheckpointError(f"manifest maps {canonical!r} to missing array {key!r}")
        tensors[canonical] = torch.from_numpy(np.asarray(arrays[key], dtype=np.float32))
    pair = make_toy_towers(
        ToyTowerConfig(
            resolution=int(manifest["resolution"]),
            embed_dim=int(manifest["embed_dim"]),
            vocab_words=list(manifest["vocab"]),
        )
    )
    _load_tower_tensors(pair, tensors, source=str(manifest_path))
    return pair
