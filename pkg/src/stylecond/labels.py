"""Synthetic class-conditions: embed each logo, then partition with K-means.

Two embedding routes feed the same clustering step:

* word labels: the mean of the word vectors describing an image;
* image features: a fixed-length feature vector from a :class:`FeatureExtractor`.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Protocol, Sequence

import numpy as np

from .dataset import DatasetManifest, ImageRecord
from .features import FeatureExtractor

logger = logging.getLogger(__name__)

METHODS = ("word_midpoint", "cnn_embedding", "external")
LABELS_NAME = "labels.csv"
CLUSTERS_NAME = "clusters.json"


class LabelError(ValueError):
    pass


@dataclass(frozen=True)
class EmbeddingPoint:
    id: str
    vector: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float64)
        if v.ndim != 1 or not np.all(np.isfinite(v)):
            raise LabelError(f"point {self.id}: vector must be 1-D and finite")
        object.__setattr__(self, "vector", v)


class WordEmbedder(Protocol):
    dim: int

    def lookup(self, word: str) -> Optional[np.ndarray]: ...


class TableWordEmbedder:
    """Word vectors from a ``word<TAB>v1 v2 ...`` text table."""

    def __init__(self, table: Mapping[str, np.ndarray]):
        dims = {len(v) for v in table.values()}
        if len(dims) > 1:
            raise LabelError(f"inconsistent embedding dims {sorted(dims)}")
        self.table = {w: np.asarray(v, dtype=np.float64) for w, v in table.items()}
        self.dim = dims.pop() if dims else 0

    @classmethod
    def from_file(cls, path) -> "TableWordEmbedder":
        table = {}
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            try:
                word, values = line.split("\t", 1)
                table[word] = np.array([float(v) for v in values.split()])
            except ValueError as exc:
                raise LabelError(f"{path}:{lineno}: malformed embedding line") from exc
        return cls(table)

    def lookup(self, word: str) -> Optional[np.ndarray]:
        return self.table.get(word)


def word_label_midpoint(words: Sequence[str], embedder: WordEmbedder, record_id: str = "?") -> np.ndarray:
    """Componentwise mean of the vectors of every word the embedder knows."""
    if not words:
        raise LabelError(f"record {record_id}: empty word list")
    vectors = [v for v in (embedder.lookup(w) for w in words) if v is not None]
    if not vectors:
        raise LabelError(f"record {record_id}: none of {list(words)} has a word vector")
    # sum-then-divide in sorted order keeps the result independent of word order
    stacked = np.stack(sorted((np.asarray(v, dtype=np.float64) for v in vectors), key=lambda v: tuple(v)))
    return stacked.sum(axis=0) / len(vectors)


def extract_cnn_features(record: ImageRecord, extractor: FeatureExtractor) -> EmbeddingPoint:
    try:
        vec = np.asarray(extractor.extract(record.pixels), dtype=np.float64)
    except Exception as exc:
        raise LabelError(f"feature extraction failed for record {record.id}: {exc}") from exc
    return EmbeddingPoint(record.id, vec)


def word_points(manifest: DatasetManifest, words: Mapping[str, Sequence[str]], embedder: WordEmbedder) -> list[EmbeddingPoint]:
    points = []
    for rec in manifest.kept:
        if rec.id not in words:
            raise LabelError(f"record {rec.id}: no entry in word-label fixture")
        points.append(EmbeddingPoint(rec.id, word_label_midpoint(words[rec.id], embedder, rec.id)))
    return points


def feature_points(manifest: DatasetManifest, extractor: FeatureExtractor) -> list[EmbeddingPoint]:
    return [extract_cnn_features(ImageRecord(rec.id, manifest.read_pixels(rec.id), rec.source), extractor)
            for rec in manifest.kept]


# --------------------------------------------------------------------------- K-means


@dataclass
class ClusterAssignment:
    centroids: np.ndarray
    labels: dict[str, int]
    inertia: float
    k: int
    seed: int
    n_iter: int = 0
    inertia_history: list[float] = field(default_factory=list)


def _sq_dists(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - centroids[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centers = [x[rng.integers(n)]]
    closest = _sq_dists(x, np.array(centers))[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            raise LabelError("fewer distinct points than clusters")
        idx = int(rng.choice(n, p=closest / total))
        centers.append(x[idx])
        closest = np.minimum(closest, _sq_dists(x, x[idx][None])[:, 0])
    return np.array(centers)


def _cluster_means(x: np.ndarray, labels: np.ndarray, k: int, previous: np.ndarray) -> np.ndarray:
    centroids = previous.copy()
    for j in range(k):
        members = x[labels == j]
        if len(members):
            centroids[j] = members.sum(axis=0) / len(members)
    return centroids


def _repair_empty(x: np.ndarray, labels: np.ndarray, centroids: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Move each empty cluster's centroid onto the point farthest from its own centroid."""
    labels = labels.copy()
    for j in range(k):
        if np.any(labels == j):
            continue
        counts = np.bincount(labels, minlength=k)
        d = np.einsum("nd,nd->n", x - centroids[labels], x - centroids[labels])
        d[counts[labels] <= 1] = -1.0
        far = int(np.argmax(d))
        centroids[j] = x[far]
        labels[far] = j
    return labels, centroids


def _lloyd(x: np.ndarray, k: int, rng: np.random.Generator, max_iter: int, tol: float):
    centroids = _kmeans_pp(x, k, rng)
    history: list[float] = []
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        labels = np.argmin(_sq_dists(x, centroids), axis=1)
        labels, centroids = _repair_empty(x, labels, centroids, k)
        history.append(float(np.sum((x - centroids[labels]) ** 2)))
        new = _cluster_means(x, labels, k, centroids)
        shift = float(np.max(np.sqrt(np.sum((new - centroids) ** 2, axis=1))))
        centroids = new
        if shift < tol:
            break
    labels = np.argmin(_sq_dists(x, centroids), axis=1)
    labels, centroids = _repair_empty(x, labels, centroids, k)
    return centroids, labels, float(np.sum((x - centroids[labels]) ** 2)), n_iter, history


def kmeans_cluster(points: Sequence[EmbeddingPoint], k: int = 10, seed: int = 0, max_iter: int = 300,
                   tol: float = 1e-6, n_init: int = 10) -> ClusterAssignment:
    """Lloyd's algorithm from seeded k-means++ starts; the lowest-inertia run wins.

    Each run stops once the largest centroid shift drops below ``tol`` or after
    ``max_iter`` iterations. ``inertia_history`` belongs to the winning run and
    holds the objective after each assignment step (non-increasing).
    """
    if k < 1 or max_iter < 1 or tol < 0 or n_init < 1:
        raise LabelError("need k >= 1, max_iter >= 1, tol >= 0, n_init >= 1")
    if len(points) < k:
        raise LabelError(f"{len(points)} points cannot form {k} clusters; use a smaller K")
    dims = {p.vector.shape[0] for p in points}
    if len(dims) != 1:
        raise LabelError(f"inconsistent point dimensions {sorted(dims)}")
    x = np.stack([p.vector for p in points])
    distinct = len(np.unique(x, axis=0))
    if distinct < k:
        raise LabelError(f"only {distinct} distinct points for K={k}; use a smaller K")

    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        run = _lloyd(x, k, rng, max_iter, tol)
        if best is None or run[2] < best[2]:
            best = run
    centroids, labels, inertia, n_iter, history = best
    return ClusterAssignment(
        centroids=centroids,
        labels={p.id: int(l) for p, l in zip(points, labels)},
        inertia=inertia,
        k=k,
        seed=seed,
        n_iter=n_iter,
        inertia_history=history,
    )


# --------------------------------------------------------------------------- conditioned dataset


@dataclass
class ConditionedDataset:
    manifest: DatasetManifest
    k: int
    labels: dict[str, int]
    method: str
    centroids: Optional[np.ndarray] = None
    inertia: Optional[float] = None
    seed: Optional[int] = None

    def class_counts(self) -> np.ndarray:
        return np.bincount([self.labels[r.id] for r in self.manifest.kept], minlength=self.k)

    def save(self, directory=None) -> Path:
        directory = Path(directory) if directory is not None else self.manifest.root
        directory.mkdir(parents=True, exist_ok=True)
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["id", "cluster"])
        for rec in self.manifest.kept:
            writer.writerow([rec.id, self.labels[rec.id]])
        (directory / LABELS_NAME).write_text(buf.getvalue(), encoding="utf-8")
        meta = {
            "K": self.k,
            "method": self.method,
            "seed": self.seed,
            "inertia": self.inertia,
            "centroids": None if self.centroids is None else np.asarray(self.centroids).tolist(),
        }
        (directory / CLUSTERS_NAME).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return directory

    @classmethod
    def load(cls, manifest: DatasetManifest, directory=None) -> "ConditionedDataset":
        directory = Path(directory) if directory is not None else manifest.root
        labels_path, meta_path = directory / LABELS_NAME, directory / CLUSTERS_NAME
        if not labels_path.exists() or not meta_path.exists():
            raise LabelError(f"no {LABELS_NAME}/{CLUSTERS_NAME} in {directory}")
        with labels_path.open(encoding="utf-8", newline="") as fh:
            reader = csv.DictReader(fh)
            labels = {row["id"]: int(row["cluster"]) for row in reader}
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        ds = cls(
            manifest=manifest,
            k=int(meta["K"]),
            labels=labels,
            method=meta["method"],
            centroids=None if meta.get("centroids") is None else np.array(meta["centroids"]),
            inertia=meta.get("inertia"),
            seed=meta.get("seed"),
        )
        ds.validate()
        return ds

    def validate(self) -> None:
        missing = [r.id for r in self.manifest.kept if r.id not in self.labels]
        if missing:
            raise LabelError(f"no label for kept records: {', '.join(missing)}")
        bad = {i: l for i, l in self.labels.items() if not 0 <= l < self.k}
        if bad:
            raise LabelError(f"labels outside [0, {self.k}): {bad}")
        if self.method not in METHODS:
            raise LabelError(f"unknown labelling method {self.method!r}")


def assign_conditions(manifest: DatasetManifest, assignment: ClusterAssignment, method: str,
                      directory=None) -> ConditionedDataset:
    """Join cluster labels onto the kept records and write labels.csv + clusters.json."""
    missing = [r.id for r in manifest.kept if r.id not in assignment.labels]
    if missing:
        raise LabelError(f"cluster assignment is missing kept records: {', '.join(missing)}")
    ds = ConditionedDataset(
        manifest=manifest,
        k=assignment.k,
        labels={r.id: assignment.labels[r.id] for r in manifest.kept},
        method=method,
        centroids=assignment.centroids,
        inertia=assignment.inertia,
        seed=assignment.seed,
    )
    ds.validate()
    ds.save(directory)
    return ds


def external_conditions(manifest: DatasetManifest, labels: Mapping[str, int], k: int, directory=None) -> ConditionedDataset:
    """Conditions supplied from outside (e.g. known generator classes)."""
    ds = ConditionedDataset(manifest, k, {r.id: int(labels[r.id]) for r in manifest.kept if r.id in labels}, "external")
    ds.validate()
    ds.save(directory)
    return ds


def cluster_report(points: Sequence[EmbeddingPoint], assignment: ClusterAssignment) -> tuple[str, dict]:
    """Per-cluster size, share of inertia and nearest-centroid margins.

    The margin of a point is the Euclidean distance to the second-nearest
    centroid minus the distance to its own centroid (undefined for K=1).
    """
    ids = [p.id for p in points]
    if set(ids) - set(assignment.labels):
        raise LabelError("points not covered by assignment")
    x = np.stack([p.vector for p in points])
    lab = np.array([assignment.labels[i] for i in ids])
    c = np.asarray(assignment.centroids)
    if c.shape[1] != x.shape[1]:
        raise LabelError("centroid and point dimensions differ")
    k = assignment.k
    dist = np.sqrt(_sq_dists(x, c))
    own = dist[np.arange(len(x)), lab]
    per_cluster_inertia = np.array([np.sum(own[lab == j] ** 2) for j in range(k)])
    sizes = np.bincount(lab, minlength=k)
    total = per_cluster_inertia.sum()
    shares = per_cluster_inertia / total if total > 0 else sizes / sizes.sum()

    if k > 1:
        other = dist.copy()
        other[np.arange(len(x)), lab] = np.inf
        margins = other.min(axis=1) - own
    else:
        margins = None

    clusters = []
    for j in range(k):
        entry = {"cluster": j, "size": int(sizes[j]), "inertia_share": float(shares[j])}
        if margins is not None and sizes[j]:
            m = margins[lab == j]
            entry.update(margin_min=float(m.min()), margin_mean=float(m.mean()), margin_max=float(m.max()))
        else:
            entry.update(margin_min=None, margin_mean=None, margin_max=None)
        clusters.append(entry)
    report = {"K": k, "inertia": float(total), "clusters": clusters,
              "margins": None if margins is None else {i: float(m) for i, m in zip(ids, margins)}}

    lines = [f"K={k} inertia={total:.6g}"]
    for e in clusters:
        margin = "n/a" if e["margin_mean"] is None else f"{e['margin_mean']:.4g}"
        lines.append(f"cluster {e['cluster']}: size={e['size']} inertia_share={e['inertia_share']:.4f} mean_margin={margin}")
    return "\n".join(lines) + "\n", report
