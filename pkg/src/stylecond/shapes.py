"""Synthetic logo-like corpus: flat colored shapes on a plain background.

Used to make every pipeline stage runnable without external data. Next to the
images the generator can write the word-label, word-embedding and OCR fixtures
the other stages consume.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, ImageDraw

from .dataset import content_id

COLORS = {
    "red": (220, 30, 30),
    "blue": (30, 60, 220),
    "green": (30, 170, 60),
    "yellow": (235, 200, 30),
    "purple": (140, 40, 170),
    "black": (20, 20, 20),
}
SHAPES = ("circle", "square", "triangle")
BACKGROUND = (245, 245, 245)
SUPERSAMPLE = 4


@dataclass(frozen=True)
class ShapeClass:
    shape: str
    color: str


@dataclass(frozen=True)
class ShapeEntry:
    file: str
    id: str
    shape: str
    color: str
    label: int


def draw_shape(resolution: int, shape: str, color, center=(0.5, 0.5), size: float = 0.6,
               background=BACKGROUND) -> np.ndarray:
    """Render one antialiased shape; ``center`` and ``size`` are fractions of the side."""
    if shape not in SHAPES:
        raise ValueError(f"unknown shape {shape!r}")
    rgb = COLORS[color] if isinstance(color, str) else tuple(color)
    side = resolution * SUPERSAMPLE
    im = Image.new("RGB", (side, side), background)
    draw = ImageDraw.Draw(im)
    cx, cy, half = center[0] * side, center[1] * side, size * side / 2
    if shape == "circle":
        draw.ellipse([cx - half, cy - half, cx + half, cy + half], fill=rgb)
    elif shape == "square":
        draw.rectangle([cx - half, cy - half, cx + half, cy + half], fill=rgb)
    else:
        h = half * math.sqrt(3) / 1.5
        draw.polygon([(cx, cy - h), (cx - half, cy + h / 2), (cx + half, cy + h / 2)], fill=rgb)
    im = im.resize((resolution, resolution), Image.Resampling.BOX)
    return np.asarray(im, dtype=np.uint8)


def make_shapes(out_dir, classes: Sequence[ShapeClass], per_class: int, resolution: int = 32,
                seed: int = 0, jitter: float = 0.08) -> list[ShapeEntry]:
    """Write ``per_class`` images for each shape class and return their entries.

    Entry ids equal the store ids the images get when ingested at
    ``max_resolution == resolution`` (no resize happens then).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    entries = []
    for i in range(per_class * len(classes)):
        label = i % len(classes)
        cls = classes[label]
        center = 0.5 + rng.uniform(-jitter, jitter, size=2)
        size = rng.uniform(0.45, 0.65)
        pixels = draw_shape(resolution, cls.shape, cls.color, center=tuple(center), size=size)
        name = f"shape_{i:04d}.png"
        Image.fromarray(pixels).save(out_dir / name)
        entries.append(ShapeEntry(name, content_id(pixels), cls.shape, cls.color, label))
    (out_dir / "shapes.json").write_text(
        json.dumps([asdict(e) for e in entries], indent=2) + "\n", encoding="utf-8")
    return entries


def red_circles_blue_squares(out_dir, per_class: int, resolution: int = 32, seed: int = 0) -> list[ShapeEntry]:
    return make_shapes(out_dir, [ShapeClass("circle", "red"), ShapeClass("square", "blue")],
                       per_class, resolution, seed)


def write_word_fixture(entries: Sequence[ShapeEntry], path, extra_words: Sequence[str] = ("logo",)) -> Path:
    """``{id: [words]}`` with the color and shape names plus ``extra_words``."""
    data = {e.id: [e.color, e.shape, *extra_words] for e in entries}
    path = Path(path)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def write_embedding_table(path, dim: int = 16, seed: int = 0, words: Sequence[str] | None = None) -> Path:
    """Plain-text ``word<TAB>v1 v2 ...`` table with seeded random vectors."""
    words = list(words) if words is not None else [*COLORS, *SHAPES, "logo"]
    rng = np.random.default_rng(seed)
    lines = []
    for w in words:
        vec = rng.standard_normal(dim)
        lines.append(w + "\t" + " ".join(f"{v:.6f}" for v in vec))
    path = Path(path)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def write_ocr_fixture(entries: Sequence[ShapeEntry], path, texts: dict[str, str]) -> Path:
    """``{id: text}`` for the entries whose file name is a key of ``texts``."""
    data = {e.id: texts[e.file] for e in entries if e.file in texts}
    path = Path(path)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
