"""Progressive training loop, phase schedule and sample grids."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from PIL import Image

from .checkpoint import load_checkpoint, load_optimizer_state, save_checkpoint
from .config import ConfigError, RunConfig, TrainConfig
from .dataset import DatasetManifest, load_batch, one_hot, sample_indices, unit_to_pixels
from .labels import ConditionedDataset
from .losses import gradient_penalty, wgan_d_loss, wgan_g_loss
from .model import LatentBatch, ModelPair, generator_forward
from .truncation import centers_for_rows, generator_center_of_mass, truncate_latent

logger = logging.getLogger(__name__)

METRICS_NAME = "metrics.csv"
METRICS_HEADER = ["step", "images_seen", "phase", "alpha", "d_loss", "g_loss", "gp"]
# fields that may change between a run and its resumption
RESUMABLE_FIELDS = {"max_steps", "total_images", "log_every", "checkpoint_every", "grid_every", "grid_samples", "grid_psi"}


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainState:
    step: int = 0
    phase: int = 0
    alpha: float = 1.0
    images_seen: int = 0
    seed: int = 0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class TrainResult:
    checkpoint: Path
    metrics: Path
    state: TrainState
    grids: list[Path]


def schedule_phase(images_seen: int, config: TrainConfig, max_phase: int) -> tuple[int, float]:
    """Phase and fade-in weight after ``images_seen`` training images.

    Each resolution is stabilized for ``images_per_phase`` images, then the
    next one fades in over ``images_per_transition`` images with alpha rising
    linearly from 0 to 1. The last phase runs with alpha = 1 indefinitely.
    """
    if images_seen < 0:
        raise ValueError("images_seen must be >= 0")
    cycle = config.images_per_phase + config.images_per_transition
    k, rem = divmod(images_seen, cycle)
    if k >= max_phase:
        return max_phase, 1.0
    if rem < config.images_per_phase:
        return k, 1.0
    return k + 1, (rem - config.images_per_phase) / config.images_per_transition


def step_seed(seed: int, step: int, *tags: int) -> int:
    return int(np.random.SeedSequence([seed, step, *tags]).generate_state(1)[0])


def sample_conditions(manifest: DatasetManifest, labels: Optional[ConditionedDataset], n: int, seed: int) -> np.ndarray:
    """One-hot conditions drawn from the labels' empirical class distribution."""
    if labels is None:
        return np.zeros((n, 0), dtype=np.float32)
    kept = manifest.kept
    idx = sample_indices(len(kept), n, seed)
    return one_hot([labels.labels[kept[i].id] for i in idx], labels.k)


def resolve_config(config: RunConfig, labels: Optional[ConditionedDataset]) -> RunConfig:
    """Fill ``num_classes`` from the labels and check it against an explicit value."""
    k = 0 if labels is None else labels.k
    if config.model.num_classes is not None and config.model.num_classes != k:
        raise ConfigError(f"config num_classes={config.model.num_classes} but the labels have K={k}")
    model = dataclasses.replace(config.model, num_classes=k, channels=config.model.channel_map())
    resolved = RunConfig(model, config.train)
    resolved.validate()
    return resolved


def _check_resume_compatible(config: RunConfig, stored: RunConfig) -> None:
    a, b = config.to_dict()["train"], stored.to_dict()["train"]
    changed = sorted(k for k in a if a[k] != b[k] and k not in RESUMABLE_FIELDS)
    if changed:
        raise ConfigError(f"cannot resume: training fields changed since checkpoint: {', '.join(changed)}")


def _open_metrics(path: Path, resume_step: Optional[int]):
    rows = []
    if resume_step is not None and path.exists():
        with path.open(encoding="utf-8", newline="") as fh:
            rows = [r for r in csv.DictReader(fh) if int(r["step"]) <= resume_step]
    fh = path.open("w", encoding="utf-8", newline="")
    writer = csv.DictWriter(fh, fieldnames=METRICS_HEADER, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    fh.flush()
    return fh, writer


def _grid_name(step: int, psi: float) -> str:
    return f"step{step}_psi{psi:g}.png"


def train(config: RunConfig, manifest: DatasetManifest, labels: Optional[ConditionedDataset], out_dir,
          resume=None) -> TrainResult:
    """Run (or resume) progressive conditional WGAN-GP training.

    Every random draw is seeded from ``(seed, step, ...)``, so a resumed run
    replays the exact loss sequence of an uninterrupted one.
    """
    config = resolve_config(config, labels)
    tc, mc = config.train, config.model
    missing = [r for r in mc.resolutions if r not in manifest.resolutions]
    if missing:
        raise ConfigError(f"dataset store lacks resolutions {missing}; rebuild it with max resolution {mc.max_resolution}")
    out_dir = Path(out_dir)
    (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    (out_dir / "grids").mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(config.to_json(), encoding="utf-8")

    if resume is not None:
        model, stored_state, stored = load_checkpoint(resume, config)
        _check_resume_compatible(config, stored)
        state = TrainState(**{f.name: stored_state[f.name] for f in dataclasses.fields(TrainState)})
    else:
        model = ModelPair.create(mc, seed=tc.seed)
        state = TrainState(seed=tc.seed)
    g, d = model.generator, model.discriminator
    opt_g = torch.optim.Adam(g.parameters(), lr=tc.lr_g, betas=(tc.beta1, tc.beta2), eps=tc.adam_eps)
    opt_d = torch.optim.Adam(d.parameters(), lr=tc.lr_d, betas=(tc.beta1, tc.beta2), eps=tc.adam_eps)
    if resume is not None:
        load_optimizer_state(resume, opt_g, opt_d)

    metrics_path = out_dir / METRICS_NAME
    fh, writer = _open_metrics(metrics_path, state.step if resume is not None else None)
    grids: list[Path] = []
    seed = tc.seed

    def checkpoint(tag: Optional[str] = None) -> Path:
        state.phase, state.alpha = model.phase, model.alpha
        path = out_dir / "checkpoints" / (tag or f"step{state.step}")
        return save_checkpoint(path, model, opt_g, opt_d, state.to_dict(), config)

    def grid() -> None:
        classes = list(range(mc.classes))
        path = out_dir / "grids" / _grid_name(state.step, tc.grid_psi)
        snapshot_grid(g, classes, tc.grid_samples, tc.grid_psi, seed, path, model.phase, model.alpha)
        grids.append(path)

    last_ckpt = None
    try:
        while state.images_seen < tc.total_images and (tc.max_steps is None or state.step < tc.max_steps):
            phase, alpha = schedule_phase(state.images_seen, tc, mc.max_phase)
            model.phase, model.alpha = phase, alpha
            res = 4 * 2**phase
            bs = tc.batch_size(res)

            d.requires_grad_(True)
            for i in range(tc.critic_steps):
                real, y = load_batch(manifest, labels, res, bs, step_seed(seed, state.step, 0, i))
                real, y = torch.from_numpy(real), torch.from_numpy(y)
                z = torch.randn(bs, mc.latent_dim, generator=torch.Generator().manual_seed(step_seed(seed, state.step, 1, i)))
                with torch.no_grad():
                    fake = generator_forward(model, LatentBatch(z, y), step_seed(seed, state.step, 2, i), phase, alpha)
                critic = lambda x, yy: d(x, yy, phase, alpha)  # noqa: E731
                d_loss = wgan_d_loss(critic(real, y), critic(fake, y))
                gp = gradient_penalty(critic, real, fake, y, tc.gp_lambda,
                                      generator=torch.Generator().manual_seed(step_seed(seed, state.step, 3, i)))
                opt_d.zero_grad(set_to_none=True)
                (d_loss + gp).backward()
                opt_d.step()
                state.images_seen += bs

            d.requires_grad_(False)
            y_g = torch.from_numpy(sample_conditions(manifest, labels, bs, step_seed(seed, state.step, 4)))
            z = torch.randn(bs, mc.latent_dim, generator=torch.Generator().manual_seed(step_seed(seed, state.step, 5)))
            fake = generator_forward(model, LatentBatch(z, y_g), step_seed(seed, state.step, 6), phase, alpha)
            g_loss = wgan_g_loss(d(fake, y_g, phase, alpha))
            opt_g.zero_grad(set_to_none=True)
            g_loss.backward()
            opt_g.step()
            state.step += 1

            values = (d_loss.item(), g_loss.item(), gp.item())
            if not all(math.isfinite(v) for v in values):
                path = checkpoint(f"diverged_step{state.step}")
                raise TrainingDiverged(f"non-finite loss at step {state.step} (d={values[0]}, g={values[1]}, "
                                       f"gp={values[2]}); diagnostic checkpoint at {path}")
            if state.step % tc.log_every == 0:
                writer.writerow({"step": state.step, "images_seen": state.images_seen, "phase": phase,
                                 "alpha": repr(alpha), "d_loss": repr(values[0]), "g_loss": repr(values[1]),
                                 "gp": repr(values[2])})
                fh.flush()
                logger.info("step %d res %d alpha %.3f d %.4f g %.4f gp %.4f", state.step, res, alpha, *values)
            if state.step % tc.checkpoint_every == 0:
                last_ckpt = checkpoint()
            if state.step % tc.grid_every == 0:
                grid()
    finally:
        fh.close()
        d.requires_grad_(True)

    if last_ckpt is None or last_ckpt.name != f"step{state.step}":
        last_ckpt = checkpoint()
    if not grids or grids[-1].name != _grid_name(state.step, tc.grid_psi):
        grid()
    return TrainResult(last_ckpt, metrics_path, state, grids)


# --------------------------------------------------------------------------- grids


def render_grid(images: np.ndarray, rows: int, cols: int, padding: int = 0) -> np.ndarray:
    """Tile n x 3 x h x w images in [-1, 1] row-major into one uint8 H x W x 3 array."""
    n, _, h, w = images.shape
    if n != rows * cols:
        raise ValueError(f"{n} images do not fill a {rows} x {cols} grid")
    pix = unit_to_pixels(images).transpose(0, 2, 3, 1)
    out = np.zeros((rows * h + (rows - 1) * padding, cols * w + (cols - 1) * padding, 3), dtype=np.uint8)
    for i in range(n):
        r, c = divmod(i, cols)
        out[r * (h + padding): r * (h + padding) + h, c * (w + padding): c * (w + padding) + w] = pix[i]
    return out


def grid_images(generator, classes: Sequence[int], samples_per_class: int, psi: Optional[float], seed: int,
                phase: Optional[int] = None, alpha: float = 1.0, w_avg: Optional[torch.Tensor] = None) -> tuple[np.ndarray, int]:
    """Images for a grid with one row per class; every row reuses the same z and noise.

    Returns ``(images, rows)``. Unconditional generators yield a single row.
    """
    c, d = generator.num_classes, generator.latent_dim
    if phase is None:
        phase = generator.config.max_phase
    row_classes = list(classes) if c else [None]
    if c and any(not 0 <= k < c for k in row_classes):
        raise ValueError(f"classes must lie in [0, {c})")
    z = torch.randn(samples_per_class, d, generator=torch.Generator().manual_seed(seed))
    zs = z.repeat(len(row_classes), 1)
    y = torch.zeros(len(zs), c)
    if c:
        labels = torch.as_tensor(row_classes).repeat_interleave(samples_per_class)
        y[torch.arange(len(zs)), labels] = 1.0
    with torch.no_grad():
        w = generator.map(zs, y)
        if psi is not None and psi != 1.0:
            if w_avg is None:
                w_avg = generator_center_of_mass(generator)
            w = truncate_latent(w, centers_for_rows(w_avg, y), psi)
        noise = generator.make_noise(1, phase, seed + 1, shared=True)
        images = generator.synthesize(w, noise, phase, alpha)
    return images.detach().cpu().numpy(), len(row_classes)


def snapshot_grid(generator, classes: Sequence[int], samples_per_class: int, psi: Optional[float], seed: int, path,
                  phase: Optional[int] = None, alpha: float = 1.0, w_avg: Optional[torch.Tensor] = None,
                  padding: int = 0) -> Path:
    """Write a PNG grid: one row per condition, ``samples_per_class`` columns."""
    images, rows = grid_images(generator, classes, samples_per_class, psi, seed, phase, alpha, w_avg)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(render_grid(images, rows, samples_per_class, padding)).save(path)
    return path
