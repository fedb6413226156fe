"""Image featurizers shared by label extraction and evaluation."""

from __future__ import annotations

from typing import Protocol

import numpy as np

FEATURE_DIM = 512
TOY_GRID = 8


class FeatureExtractor(Protocol):
    """Maps an H x W x 3 uint8 image to a fixed-length feature vector."""

    id: str

    def extract(self, pixels: np.ndarray) -> np.ndarray: ...


def _to_grid(pixels: np.ndarray, grid: int) -> np.ndarray:
    """Area-average (or nearest-upsample) an H x W x 3 image to grid x grid x 3."""
    x = np.asarray(pixels, dtype=np.float64) / 255.0
    side = x.shape[0]
    if side >= grid:
        f = side // grid
        return x.reshape(grid, f, grid, f, 3).mean(axis=(1, 3))
    rep = grid // side
    return np.repeat(np.repeat(x, rep, axis=0), rep, axis=1)


class ToyFeatureExtractor:
    """Fixed seeded random projection of the 8x8 downsampled image to 512 dims.

    Stands in for a pretrained CNN embedding so the pipeline stays hermetic.
    Color layout dominates the features, which is what the synthetic corpora
    vary.
    """

    def __init__(self, seed: int = 0, dim: int = FEATURE_DIM, grid: int = TOY_GRID):
        self.seed, self.dim, self.grid = seed, dim, grid
        rng = np.random.default_rng(seed)
        n_in = grid * grid * 3
        self.projection = rng.standard_normal((n_in, dim)) / np.sqrt(n_in)
        self.id = f"toy-projection-{grid}x{grid}-{dim}-seed{seed}"

    def extract(self, pixels: np.ndarray) -> np.ndarray:
        return _to_grid(pixels, self.grid).reshape(-1) @ self.projection

    def extract_batch(self, batch: np.ndarray) -> np.ndarray:
        """Features for an n x H x W x 3 uint8 batch, row order preserved."""
        if len(batch) == 0:
            return np.zeros((0, self.dim))
        flat = np.stack([_to_grid(p, self.grid).reshape(-1) for p in batch])
        return flat @ self.projection


class SoftmaxHead:
    """Seeded linear classifier head giving p(y|x) over ``k`` pseudo-classes.

    Probabilities from this head are only comparable within this package,
    never to scores computed with an ImageNet classifier.
    """

    def __init__(self, in_dim: int = FEATURE_DIM, k: int = 10, seed: int = 0, temperature: float = 1.0):
        rng = np.random.default_rng(seed + 7919)
        self.weight = rng.standard_normal((in_dim, k)) / np.sqrt(in_dim)
        self.temperature = temperature
        self.k = k

    def probabilities(self, features: np.ndarray) -> np.ndarray:
        logits = np.asarray(features, dtype=np.float64) @ self.weight / self.temperature
        logits -= logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        return e / e.sum(axis=1, keepdims=True)


def extract_many(extractor: FeatureExtractor, batch: np.ndarray) -> np.ndarray:
    if hasattr(extractor, "extract_batch"):
        return np.asarray(extractor.extract_batch(batch), dtype=np.float64)
    return np.stack([np.asarray(extractor.extract(p), dtype=np.float64) for p in batch])
