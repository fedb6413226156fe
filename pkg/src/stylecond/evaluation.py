"""FID, Inception Score, truncation sweeps and per-class diversity."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .dataset import DatasetManifest, load_batch, unit_to_pixels
from .features import FeatureExtractor, SoftmaxHead, extract_many
from .labels import ConditionedDataset
from .model import LatentBatch, ModelPair, generator_forward
from .training import snapshot_grid
from .truncation import (  # noqa: F401 - re-exported evaluation API
    center_of_mass_for_rows,
    generator_center_of_mass,
    latent_center_of_mass,
    truncate_latent,
)

logger = logging.getLogger(__name__)

SYMMETRY_TOL = 1e-8
EIGEN_CLAMP = 1e-10
REPORT_NAME = "eval_report.json"


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureStats:
    mu: np.ndarray
    sigma: np.ndarray
    count: int


def compute_feature_stats(features: np.ndarray) -> FeatureStats:
    """Sample mean and unbiased (n - 1) covariance of an n x F feature matrix."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise EvaluationError("need an n x F feature matrix with n >= 2")
    mu = x.mean(axis=0)
    centered = x - mu
    sigma = centered.T @ centered / (x.shape[0] - 1)
    return FeatureStats(mu, (sigma + sigma.T) / 2, x.shape[0])


def matrix_sqrt_psd(m: np.ndarray) -> np.ndarray:
    """Symmetric square root via eigendecomposition, eigenvalues clamped at 0.

    Eigenvalues below 1e-10 times the largest one are treated as zero.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise EvaluationError("matrix must be square")
    if np.max(np.abs(m - m.T), initial=0.0) > SYMMETRY_TOL:
        raise EvaluationError("matrix is not symmetric")
    vals, vecs = np.linalg.eigh((m + m.T) / 2)
    top = max(vals.max(initial=0.0), 0.0)
    vals = np.where(vals > EIGEN_CLAMP * top, vals, 0.0)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(stats_x: FeatureStats, stats_g: FeatureStats) -> float:
    """||mu_x - mu_g||^2 + Tr(S_x + S_g - 2 (S_x S_g)^(1/2)).

    Tr((S_x S_g)^(1/2)) is computed as Tr(sqrt(S_x^(1/2) S_g S_x^(1/2))), which
    shares its eigenvalues but stays symmetric.
    """
    if stats_x.mu.shape != stats_g.mu.shape:
        raise EvaluationError(f"feature dims differ: {stats_x.mu.shape} vs {stats_g.mu.shape}")
    root_x = matrix_sqrt_psd(stats_x.sigma)
    inner = root_x @ stats_g.sigma @ root_x
    cross = matrix_sqrt_psd((inner + inner.T) / 2)
    diff = stats_x.mu - stats_g.mu
    value = float(diff @ diff + np.trace(stats_x.sigma) + np.trace(stats_g.sigma) - 2.0 * np.trace(cross))
    return max(value, 0.0)


def validate_probs(probs: np.ndarray) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] < 1:
        raise EvaluationError("probabilities must be an n x k matrix")
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-6):
        raise EvaluationError("every row must be a probability distribution")
    return p


def inception_score(probs: np.ndarray) -> float:
    """exp(mean_x KL(p(y|x) || p(y))) with p(y) the column mean and 0 log 0 = 0."""
    p = validate_probs(probs)
    marginal = p.mean(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(marginal)), 0.0)
    return float(np.exp(terms.sum(axis=1).mean()))


def per_class_diversity(images: np.ndarray, labels: np.ndarray) -> dict[int, Optional[float]]:
    """Mean pairwise L2 distance between same-class images (None below 2 samples)."""
    out: dict[int, Optional[float]] = {}
    flat = np.asarray(images, dtype=np.float64).reshape(len(images), -1)
    for k in sorted(set(int(l) for l in labels)):
        members = flat[labels == k]
        if len(members) < 2:
            out[k] = None
            continue
        sq = np.sum(members**2, axis=1)
        d2 = np.maximum(sq[:, None] + sq[None, :] - 2 * members @ members.T, 0.0)
        iu = np.triu_indices(len(members), 1)
        out[k] = float(np.sqrt(d2[iu]).mean())
    return out


@dataclass
class EvalReport:
    fid: float
    is_score: float
    per_class_diversity: dict[int, Optional[float]]
    n_samples: int
    seed: int
    featurizer: str
    checkpoint: Optional[str] = None
    resolution: Optional[int] = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "fid": self.fid,
            "is": self.is_score,
            "per_class_diversity": {str(k): v for k, v in self.per_class_diversity.items()},
            "n_samples": self.n_samples,
            "seed": self.seed,
            "featurizer": self.featurizer,
            "checkpoint": self.checkpoint,
            "resolution": self.resolution,
            "extra": self.extra,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "EvalReport":
        return cls(
            fid=data["fid"],
            is_score=data["is"],
            per_class_diversity={int(k): v for k, v in data["per_class_diversity"].items()},
            n_samples=data["n_samples"],
            seed=data["seed"],
            featurizer=data["featurizer"],
            checkpoint=data.get("checkpoint"),
            resolution=data.get("resolution"),
            extra=data.get("extra", {}),
        )

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path) -> "EvalReport":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


class ModelSampler:
    """Adapts a trained model to the ``sampler(Y, seed) -> images`` protocol."""

    def __init__(self, model: ModelPair, phase: Optional[int] = None, alpha: Optional[float] = None,
                 psi: Optional[float] = None, batch_size: int = 64):
        self.model = model
        self.phase = model.phase if phase is None else phase
        self.alpha = (model.alpha if phase is None else 1.0) if alpha is None else alpha
        self.psi = psi
        self.batch_size = batch_size
        self.resolution = 4 * 2**self.phase

    def __call__(self, y: np.ndarray, seed: int) -> np.ndarray:
        g = self.model.generator
        gen = torch.Generator().manual_seed(seed)
        z = torch.randn(len(y), g.latent_dim, generator=gen)
        y = torch.as_tensor(y, dtype=torch.float32)
        w_avg = None
        if self.psi is not None:
            w_avg = center_of_mass_for_rows(g, y)
        out = []
        with torch.no_grad():
            for start in range(0, len(y), self.batch_size):
                sl = slice(start, start + self.batch_size)
                latents = LatentBatch(z[sl], y[sl])
                out.append(generator_forward(self.model, latents, seed + 1 + start, self.phase, self.alpha,
                                             psi=self.psi, w_avg=None if w_avg is None else w_avg[sl]))
        return torch.cat(out).numpy()


def _to_hwc_pixels(images: np.ndarray) -> np.ndarray:
    return unit_to_pixels(images).transpose(0, 2, 3, 1)


def evaluate_model(sampler: Callable[[np.ndarray, int], np.ndarray], manifest: DatasetManifest,
                   labels: Optional[ConditionedDataset], featurizer: FeatureExtractor, n_samples: int, seed: int,
                   resolution: int, prob_head: Optional[SoftmaxHead] = None, checkpoint: Optional[str] = None) -> EvalReport:
    """Compare ``n_samples`` real and generated images in feature space.

    Real images are drawn uniformly from the store; generated ones use the
    conditions of those same draws, so they follow the dataset's empirical
    class distribution. ``sampler(Y, seed)`` must return n x 3 x res x res
    images in [-1, 1].
    """
    if n_samples < 2:
        raise EvaluationError("n_samples must be >= 2")
    n_kept = len(manifest.kept)
    if n_samples > n_kept:
        logger.warning("n_samples=%d exceeds the %d kept images; sampling with replacement", n_samples, n_kept)
    real, y = load_batch(manifest, labels, resolution, n_samples, seed)
    fake = np.asarray(sampler(y, seed), dtype=np.float32)
    if fake.shape != real.shape:
        raise EvaluationError(f"sampler returned {fake.shape}, expected {real.shape}")

    real_feat = extract_many(featurizer, _to_hwc_pixels(real))
    fake_feat = extract_many(featurizer, _to_hwc_pixels(fake))
    fid = frechet_distance(compute_feature_stats(real_feat), compute_feature_stats(fake_feat))
    head = prob_head or SoftmaxHead(in_dim=fake_feat.shape[1])
    is_score = inception_score(head.probabilities(fake_feat))
    classes = y.argmax(axis=1) if y.shape[1] else np.zeros(len(y), dtype=np.int64)
    return EvalReport(
        fid=fid,
        is_score=is_score,
        per_class_diversity=per_class_diversity(fake, classes),
        n_samples=n_samples,
        seed=seed,
        featurizer=getattr(featurizer, "id", type(featurizer).__name__),
        checkpoint=checkpoint,
        resolution=resolution,
    )


def sweep_name(psi: float) -> str:
    return f"sweep_psi{psi:g}.png"


def truncation_sweep(generator, psis: Sequence[float], classes: Sequence[int], samples: int, seed: int, out_dir,
                     phase: Optional[int] = None, alpha: float = 1.0,
                     w_avg: Optional[torch.Tensor] = None) -> list[Path]:
    """One grid per psi; all grids share z, noise and the latent center."""
    if not psis:
        raise EvaluationError("psis must be non-empty")
    if w_avg is None:
        with torch.no_grad():
            w_avg = generator_center_of_mass(generator)
    out_dir = Path(out_dir)
    return [snapshot_grid(generator, classes, samples, psi, seed, out_dir / sweep_name(psi), phase, alpha, w_avg=w_avg)
            for psi in psis]
