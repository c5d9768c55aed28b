"""Synthetic shapes dataset and paired image-caption loading.

The generator renders colored geometric shapes on a plain dark background
with seeded jitter in position, size, and orientation, and captions each
image from a fixed template ("a red circle").  A dataset on disk is a
directory of PNGs plus a tab-separated manifest, one ``relative/path.png``
and caption per line; any directory following that layout loads the same
way, so real data can be swapped in without code changes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageDraw

from mmenergy.errors import ConfigError, InputError
from mmenergy.seeding import derive_seed

DEFAULT_COLORS: dict[str, tuple[float, float, float]] = {
    "red": (0.92, 0.12, 0.12),
    "green": (0.10, 0.80, 0.18),
    "blue": (0.15, 0.28, 0.92),
    "yellow": (0.95, 0.87, 0.10),
    "orange": (0.96, 0.55, 0.08),
    "purple": (0.60, 0.16, 0.82),
    "cyan": (0.10, 0.82, 0.86),
    "white": (0.96, 0.96, 0.96),
}
DEFAULT_SHAPES = ("circle", "square", "triangle", "cross")
BACKGROUND = (0.09, 0.09, 0.09)

MANIFEST_NAME = "manifest.tsv"
_SUPERSAMPLE = 4


def default_vocab_words() -> list[str]:
    """Words needed to caption the default dataset."""
    return ["a"] + list(DEFAULT_COLORS) + list(DEFAULT_SHAPES)


@dataclass
class DatasetSpec:
    count: int = 320
    resolution: int = 32
    seed: int = 0
    colors: list[str] = field(default_factory=lambda: list(DEFAULT_COLORS))
    shapes: list[str] = field(default_factory=lambda: list(DEFAULT_SHAPES))

    def __post_init__(self) -> None:
        if self.count < 1:
            raise ConfigError("dataset count must be >= 1")
        if self.resolution < 8:
            raise ConfigError("dataset resolution must be >= 8")
        unknown = set(self.colors) - set(DEFAULT_COLORS)
        if unknown:
            raise ConfigError(f"unknown colors {sorted(unknown)}")
        unknown = set(self.shapes) - set(DEFAULT_SHAPES)
        if unknown:
            raise ConfigError(f"unknown shapes {sorted(unknown)}")
        if not self.colors or not self.shapes:
            raise ConfigError("need at least one color and one shape")


def render_shape(color: str, shape: str, resolution: int, seed: int) -> np.ndarray:
    """Render one jittered shape as uint8 HxWx3.

    Drawing happens on a supersampled canvas and is downsampled with a box
    filter for stable antialiased edges; everything about the render is a
    pure function of the arguments.
    """
    if color not in DEFAULT_COLORS:
        raise InputError(f"unknown color {color!r}")
    if shape not in DEFAULT_SHAPES:
        raise InputError(f"unknown shape {shape!r}")
    rng = np.random.default_rng(seed)
    size = resolution * _SUPERSAMPLE
    img = Image.new(
        "RGB", (size, size), tuple(int(round(255 * c)) for c in BACKGROUND)
    )
    draw = ImageDraw.Draw(img)
    fill = tuple(int(round(255 * c)) for c in DEFAULT_COLORS[color])

    cx = size / 2 + rng.uniform(-0.09, 0.09) * size
    cy = size / 2 + rng.uniform(-0.09, 0.09) * size
    radius = rng.uniform(0.26, 0.37) * size  # half-extent in supersampled px
    angle = rng.uniform(0, 2 * math.pi)

    def rot(points: list[tuple[float, float]], theta: float) -> list[tuple[float, float]]:
        c, s = math.cos(theta), math.sin(theta)
        return [(cx + c * x - s * y, cy + s * x + c * y) for x, y in points]

    if shape == "circle":
        draw.ellipse([cx - radius, cy - radius, cx + radius, cy + radius], fill=fill)
    elif shape == "square":
        half = radius / math.sqrt(2)
        corners = [(-half, -half), (half, -half), (half, half), (-half, half)]
        draw.polygon(rot(corners, angle * 0.25), fill=fill)
    elif shape == "triangle":
        corners = [
            (radius * math.cos(a), radius * math.sin(a))
            for a in (angle + k * 2 * math.pi / 3 for k in range(3))
        ]
        draw.polygon(rot(corners, 0.0), fill=fill)
    else:  # cross
        arm = radius * 0.38
        bar = [(-radius, -arm), (radius, -arm), (radius, arm), (-radius, arm)]
        theta = angle * 0.25
        draw.polygon(rot(bar, theta), fill=fill)
        draw.polygon(rot(bar, theta + math.pi / 2), fill=fill)

    img = img.resize((resolution, resolution), Image.BOX)
    return np.asarray(img, dtype=np.uint8)


def caption_for(color: str, shape: str) -> str:
    return f"a {color} {shape}"


def caption_to_labels(caption: str) -> tuple[int, int]:
    """Map a templated caption back to (color index, shape index)."""
    words = caption.lower().split()
    if len(words) != 3 or words[0] != "a":
        raise InputError(f"caption {caption!r} does not match the template")
    colors = list(DEFAULT_COLORS)
    shapes = list(DEFAULT_SHAPES)
    if words[1] not in colors or words[2] not in shapes:
        raise InputError(f"caption {caption!r} uses unknown color or shape")
    return colors.index(words[1]), shapes.index(words[2])


@dataclass
class PairedDataset:
    """Image paths and captions under a root directory, images cached on read."""

    root: Path
    records: list[tuple[str, str]]
    resolution: int

    def __post_init__(self) -> None:
        if not self.records:
            raise InputError("dataset has no records")
        self._cache: dict[int, torch.Tensor] = {}

    def __len__(self) -> int:
        return len(self.records)

    @property
    def captions(self) -> list[str]:
        return [caption for _, caption in self.records]

    def image(self, index: int) -> torch.Tensor:
        """Decoded image as float32 (3, H, W) in [0, 1]."""
        if index not in self._cache:
            rel, _ = self.records[index]
            path = self.root / rel
            try:
                with Image.open(path) as img:
                    arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
            except OSError as exc:
                raise InputError(f"cannot decode {path}: {exc}") from exc
            if arr.shape[0] != self.resolution or arr.shape[1] != self.resolution:
                raise InputError(
                    f"{path}: resolution {arr.shape[:2]} != dataset resolution {self.resolution}"
                )
            self._cache[index] = torch.from_numpy(arr).permute(2, 0, 1).contiguous()
        return self._cache[index]

    def images(self, indices) -> torch.Tensor:
        return torch.stack([self.image(int(i)) for i in indices])

    def batch(self, indices) -> tuple[torch.Tensor, list[str]]:
        return self.images(indices), [self.records[int(i)][1] for i in indices]


def make_synthetic_dataset(spec: DatasetSpec, out_dir: str | Path) -> PairedDataset:
    """Render ``spec.count`` images round-robin over the class grid.

    320 records over the default 8 colors x 4 shapes give exactly 10 per
    class.  Rendering is seeded per record, so the same spec writes
    byte-identical files.
    """
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    combos = [(c, s) for c in spec.colors for s in spec.shapes]
    records: list[tuple[str, str]] = []
    for i in range(spec.count):
        color, shape = combos[i % len(combos)]
        arr = render_shape(
            color, shape, spec.resolution, derive_seed(spec.seed, "render", i)
        )
        rel = f"images/{i:05d}.png"
        Image.fromarray(arr).save(out_dir / rel)
        records.append((rel, caption_for(color, shape)))

    manifest = "".join(f"{rel}\t{caption}\n" for rel, caption in records)
    (out_dir / MANIFEST_NAME).write_text(manifest)
    (out_dir / "dataset.json").write_text(
        json.dumps(
            {
                "count": spec.count,
                "resolution": spec.resolution,
                "seed": spec.seed,
                "colors": spec.colors,
                "shapes": spec.shapes,
            },
            indent=2,
        )
    )
    return PairedDataset(root=out_dir, records=records, resolution=spec.resolution)


def load_dataset(root: str | Path, resolution: int | None = None) -> PairedDataset:
    """Load any directory holding ``manifest.tsv`` plus the referenced PNGs."""
    root = Path(root)
    manifest = root / MANIFEST_NAME
    if not manifest.is_file():
        raise InputError(f"no {MANIFEST_NAME} under {root}")
    records = []
    for lineno, line in enumerate(manifest.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise InputError(f"{manifest}:{lineno}: expected 'path<TAB>caption'")
        records.append((parts[0], parts[1]))
    if resolution is None:
        meta_path = root / "dataset.json"
        if meta_path.is_file():
            resolution = int(json.loads(meta_path.read_text())["resolution"])
        else:
            with Image.open(root / records[0][0]) as img:
                resolution = img.height
    return PairedDataset(root=root, records=records, resolution=resolution)


def render_class_batch(
    spec: DatasetSpec, labels: list[tuple[str, str]], seed: int
) -> torch.Tensor:
    """Fresh jittered renders for the given (color, shape) labels."""
    arrays = [
        render_shape(color, shape, spec.resolution, derive_seed(seed, "batch", i))
        for i, (color, shape) in enumerate(labels)
    ]
    stacked = np.stack(arrays).astype(np.float32) / 255.0
    return torch.from_numpy(stacked).permute(0, 3, 1, 2).contiguous()


def save_image(tensor: torch.Tensor, path: str | Path) -> None:
    """Write a single (3, H, W) float image in [0, 1] as PNG."""
    if tensor.ndim != 3 or tensor.shape[0] != 3:
        raise InputError("expected a single (3, H, W) image")
    arr = (tensor.detach().clamp(0, 1).numpy() * 255.0).round().astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr.transpose(1, 2, 0)).save(path)
