"""Image ingestion, text filtering and the multi-resolution dataset store.

Store layout::

    <root>/manifest.json
    <root>/r<N>/<id>.png      one file per kept record and resolution N
"""

from __future__ import annotations

import dataclasses
import functools
import hashlib
import json
import logging
import re
import shutil
import subprocess
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Optional, Protocol, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.json"
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".webp", ".tif", ".tiff"}


class DatasetError(ValueError):
    """Raised for invalid dataset stores or pipeline inputs."""


def is_power_of_two(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


def content_id(pixels: np.ndarray) -> str:
    """Stable id of an H x W x 3 uint8 image: sha256 over shape and bytes."""
    pixels = np.ascontiguousarray(pixels, dtype=np.uint8)
    h = hashlib.sha256()
    h.update(repr(pixels.shape).encode())
    h.update(pixels.tobytes())
    return h.hexdigest()[:16]


@dataclass(frozen=True)
class ImageRecord:
    id: str
    pixels: np.ndarray
    source: str = "corpus"

    def __post_init__(self):
        p = self.pixels
        if p.ndim != 3 or p.shape[2] != 3 or p.shape[0] != p.shape[1]:
            raise DatasetError(f"record {self.id}: expected square HxWx3 pixels, got {p.shape}")
        if not is_power_of_two(p.shape[0]) or p.shape[0] < 4:
            raise DatasetError(f"record {self.id}: side {p.shape[0]} is not a power of two >= 4")
        if p.dtype != np.uint8:
            raise DatasetError(f"record {self.id}: pixels must be uint8")
        if self.source not in ("corpus", "boost", "synthetic"):
            raise DatasetError(f"record {self.id}: unknown source {self.source!r}")


@dataclass(frozen=True)
class ManifestRecord:
    id: str
    path: str
    kept: bool = True
    drop_reason: Optional[str] = None
    source: str = "corpus"
    source_name: str = ""


@dataclass(frozen=True)
class DatasetManifest:
    """Immutable view of a dataset store; operations return new manifests.

    ``resolutions`` stays empty until :func:`build_multiresolution` has run;
    ``max_resolution`` records the ingest size.
    """

    root: Path
    records: tuple[ManifestRecord, ...]
    max_resolution: int
    seed: int
    resolutions: tuple[int, ...] = ()
    version: int = MANIFEST_VERSION

    def __post_init__(self):
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            raise DatasetError("manifest ids must be unique")
        if self.resolutions:
            res = list(self.resolutions)
            if res != sorted(res) or res[0] != 4 or res[-1] != self.max_resolution:
                raise DatasetError(f"bad resolution list {res}")

    @property
    def kept(self) -> list[ManifestRecord]:
        return [r for r in self.records if r.kept]

    def record(self, record_id: str) -> ManifestRecord:
        for r in self.records:
            if r.id == record_id:
                return r
        raise KeyError(record_id)

    def image_path(self, record_id: str, resolution: int) -> Path:
        return self.root / f"r{resolution}" / f"{record_id}.png"

    def read_pixels(self, record_id: str, resolution: Optional[int] = None) -> np.ndarray:
        path = self.image_path(record_id, resolution or self.max_resolution)
        if not path.exists():
            raise DatasetError(f"missing image file for record {record_id}: {path}")
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)

    def to_json(self) -> str:
        payload = {
            "version": self.version,
            "seed": self.seed,
            "max_resolution": self.max_resolution,
            "resolutions": list(self.resolutions),
            "records": [dataclasses.asdict(r) for r in self.records],
        }
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"

    def save(self) -> Path:
        path = self.root / MANIFEST_NAME
        path.write_text(self.to_json(), encoding="utf-8")
        return path

    @classmethod
    def load(cls, root) -> "DatasetManifest":
        root = Path(root)
        path = root / MANIFEST_NAME
        if not path.exists():
            raise DatasetError(f"no {MANIFEST_NAME} in {root}")
        data = json.loads(path.read_text(encoding="utf-8"))
        if data.get("version") != MANIFEST_VERSION:
            raise DatasetError(f"unsupported manifest version {data.get('version')}")
        return cls(
            root=root,
            records=tuple(ManifestRecord(**r) for r in data["records"]),
            max_resolution=int(data["max_resolution"]),
            seed=int(data["seed"]),
            resolutions=tuple(data["resolutions"]),
        )


class TextDetector(Protocol):
    """Returns the text found in an H x W x 3 uint8 image ("" when none)."""

    def detect(self, pixels: np.ndarray) -> str: ...


class FixtureTextDetector:
    """Looks detections up in a ``{id: text}`` map keyed by :func:`content_id`."""

    def __init__(self, detections: Mapping[str, str]):
        self.detections = dict(detections)

    @classmethod
    def from_file(cls, path) -> "FixtureTextDetector":
        return cls(json.loads(Path(path).read_text(encoding="utf-8")))

    def detect(self, pixels: np.ndarray) -> str:
        return self.detections.get(content_id(pixels), "")


class CommandTextDetector:
    """Runs an OCR executable on a temporary PNG and returns its stdout.

    ``command`` is an argv list in which ``{image}`` is replaced by the file
    path, e.g. ``["tesseract", "{image}", "stdout"]``.
    """

    def __init__(self, command: Sequence[str], timeout: float = 60.0):
        if shutil.which(command[0]) is None:
            raise DatasetError(f"OCR executable not found: {command[0]}")
        self.command = list(command)
        self.timeout = timeout

    def detect(self, pixels: np.ndarray) -> str:
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "image.png"
            Image.fromarray(pixels).save(path)
            argv = [a.replace("{image}", str(path)) for a in self.command]
            out = subprocess.run(argv, capture_output=True, text=True, timeout=self.timeout, check=True)
        return out.stdout.strip()


def center_crop_resize(image: Image.Image, size: int) -> np.ndarray:
    image = image.convert("RGB")
    w, h = image.size
    side = min(w, h)
    left, top = (w - side) // 2, (h - side) // 2
    image = image.crop((left, top, left + side, top + side))
    if side != size:
        image = image.resize((size, size), Image.Resampling.LANCZOS)
    return np.asarray(image, dtype=np.uint8)


def _list_images(directory: Path) -> list[Path]:
    return sorted(p for p in directory.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def ingest_images(directory, out_root, max_resolution: int, seed: int = 0, source: str = "corpus") -> DatasetManifest:
    """Crop, resize and store every decodable image in ``directory``.

    Files are visited in sorted name order. Undecodable files are skipped with
    a warning; an empty directory (or one with no decodable image) is an error.
    """
    directory, out_root = Path(directory), Path(out_root)
    if not is_power_of_two(max_resolution) or not 8 <= max_resolution <= 1024:
        raise DatasetError(f"max_resolution must be a power of two in [8, 1024], got {max_resolution}")
    if not directory.is_dir():
        raise DatasetError(f"input directory does not exist: {directory}")
    files = _list_images(directory)
    if not files:
        raise DatasetError(f"no images found in {directory}")

    out_dir = out_root / f"r{max_resolution}"
    out_dir.mkdir(parents=True, exist_ok=True)
    records: list[ManifestRecord] = []
    seen: set[str] = set()
    for path in files:
        try:
            with Image.open(path) as im:
                im.load()
                pixels = center_crop_resize(im, max_resolution)
        except (UnidentifiedImageError, OSError, ValueError) as exc:
            logger.warning("skipping undecodable image %s: %s", path.name, exc)
            continue
        rid = content_id(pixels)
        if rid in seen:
            logger.warning("skipping %s: same content as an earlier image (id %s)", path.name, rid)
            continue
        seen.add(rid)
        Image.fromarray(pixels).save(out_dir / f"{rid}.png")
        records.append(ManifestRecord(id=rid, path=f"r{max_resolution}/{rid}.png", source=source, source_name=path.name))
    if not records:
        raise DatasetError(f"no decodable images in {directory}")

    manifest = DatasetManifest(root=out_root, records=tuple(records), max_resolution=max_resolution, seed=seed)
    manifest.save()
    return manifest


def _alnum_count(text: str) -> int:
    return len(re.findall(r"[0-9A-Za-z]", text))


def filter_text_logos(manifest: DatasetManifest, detector: TextDetector, min_chars: int = 2) -> DatasetManifest:
    """Mark records whose detected text has at least ``min_chars`` alphanumerics as dropped.

    Detector failures keep the record (fail-open). Records already dropped are
    left alone, which makes the filter idempotent.
    """
    if min_chars < 1:
        raise DatasetError("min_chars must be >= 1")
    out = []
    for rec in manifest.records:
        if not rec.kept:
            out.append(rec)
            continue
        try:
            text = detector.detect(manifest.read_pixels(rec.id))
        except DatasetError:
            raise
        except Exception as exc:  # noqa: BLE001 - any detector failure is fail-open
            logger.warning("text detector failed on %s (%s); keeping record", rec.id, exc)
            out.append(rec)
            continue
        if _alnum_count(text or "") >= min_chars:
            out.append(dataclasses.replace(rec, kept=False, drop_reason="text"))
        else:
            out.append(rec)
    result = dataclasses.replace(manifest, records=tuple(out))
    result.save()
    return result


def box_downsample(pixels: np.ndarray) -> np.ndarray:
    """Halve an H x W x 3 uint8 image by averaging 2x2 blocks (round half up)."""
    h, w, c = pixels.shape
    blocks = pixels.astype(np.float64).reshape(h // 2, 2, w // 2, 2, c).mean(axis=(1, 3))
    return np.floor(blocks + 0.5).astype(np.uint8)


def pyramid_resolutions(max_resolution: int) -> list[int]:
    out, r = [], 4
    while r <= max_resolution:
        out.append(r)
        r *= 2
    return out


def build_multiresolution(manifest: DatasetManifest) -> DatasetManifest:
    """Write box-downsampled copies of every kept record down to 4x4."""
    resolutions = pyramid_resolutions(manifest.max_resolution)
    for rec in manifest.kept:
        src = manifest.image_path(rec.id, manifest.max_resolution)
        if not src.exists():
            raise DatasetError(f"missing source file for record {rec.id}: {src}")
        pixels = manifest.read_pixels(rec.id)
        for res in reversed(resolutions[:-1]):
            pixels = box_downsample(pixels)
            out = manifest.image_path(rec.id, res)
            out.parent.mkdir(parents=True, exist_ok=True)
            Image.fromarray(pixels).save(out)
    result = dataclasses.replace(manifest, resolutions=tuple(resolutions))
    result.save()
    return result


@functools.lru_cache(maxsize=16)
def _resolution_array(root: str, resolution: int, ids: tuple[str, ...]) -> np.ndarray:
    arrays = []
    for rid in ids:
        path = Path(root) / f"r{resolution}" / f"{rid}.png"
        if not path.exists():
            raise DatasetError(f"missing image file for record {rid} at r{resolution}")
        with Image.open(path) as im:
            arrays.append(np.asarray(im.convert("RGB"), dtype=np.uint8))
    stacked = np.stack(arrays).transpose(0, 3, 1, 2)
    stacked.setflags(write=False)
    return stacked


def pixels_to_unit(pixels: np.ndarray) -> np.ndarray:
    """Map uint8 values linearly onto [-1, 1] (0 -> -1, 255 -> 1)."""
    return pixels.astype(np.float32) / np.float32(127.5) - np.float32(1.0)


def unit_to_pixels(images: np.ndarray) -> np.ndarray:
    """Inverse of :func:`pixels_to_unit`, clipping to the valid range."""
    return np.clip(np.floor((np.asarray(images, dtype=np.float64) + 1.0) * 127.5 + 0.5), 0, 255).astype(np.uint8)


def one_hot(labels: Iterable[int], num_classes: int) -> np.ndarray:
    labels = np.asarray(list(labels), dtype=np.int64)
    out = np.zeros((len(labels), num_classes), dtype=np.float32)
    if num_classes:
        out[np.arange(len(labels)), labels] = 1.0
    return out


def sample_indices(count: int, batch_size: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).integers(0, count, size=batch_size)


def load_batch(manifest: DatasetManifest, labels, resolution: int, batch_size: int, seed: int):
    """Sample ``batch_size`` kept images uniformly (with replacement).

    ``labels`` is a :class:`~stylecond.labels.ConditionedDataset` or ``None``
    for unconditional training, in which case Y has zero columns.

    Returns ``(images, Y)``: float32 arrays of shape n x 3 x res x res in
    [-1, 1] and n x c one-hot rows.
    """
    if resolution not in manifest.resolutions:
        raise DatasetError(f"resolution {resolution} not in store {list(manifest.resolutions)}")
    if batch_size < 1:
        raise DatasetError("batch_size must be >= 1")
    kept = manifest.kept
    if not kept:
        raise DatasetError("dataset has no kept records")
    ids = tuple(r.id for r in kept)
    pixels = _resolution_array(str(manifest.root), resolution, ids)
    idx = sample_indices(len(ids), batch_size, seed)
    images = pixels_to_unit(pixels[idx])
    if labels is None:
        return images, np.zeros((batch_size, 0), dtype=np.float32)
    classes = [labels.labels[ids[i]] for i in idx]
    return images, one_hot(classes, labels.k)


def clear_cache() -> None:
    _resolution_array.cache_clear()
