"""Truncation trick: latent center of mass and interpolation toward it."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import torch

DEFAULT_CENTER_SAMPLES = 4096


def truncate_latent(w: torch.Tensor, w_avg: torch.Tensor, psi: float) -> torch.Tensor:
    """w' = w_avg + psi (w - w_avg), evaluated as (1 - psi) w_avg + psi w.

    The second form returns w_avg exactly at psi = 0 and w exactly at psi = 1.
    """
    if w_avg.shape != w.shape and w_avg.shape != w.shape[-1:]:
        raise ValueError(f"center shape {tuple(w_avg.shape)} does not fit latents {tuple(w.shape)}")
    return (1.0 - psi) * w_avg + psi * w


def latent_center_of_mass(mapping: Callable[[torch.Tensor], torch.Tensor], r: Optional[torch.Tensor],
                          class_distribution: Optional[Sequence[float]], num_samples: int, seed: int,
                          latent_dim: int, fixed_class: Optional[int] = None) -> torch.Tensor:
    """Mean of W over ``num_samples`` draws of (z, y).

    ``class_distribution`` (length c) gives the class probabilities; ``None``
    or c = 0 means unconditional. ``fixed_class`` pins y for a per-class center.
    """
    from .model import build_conditional_latent  # noqa: PLC0415 - avoids an import cycle

    if num_samples < 1:
        raise ValueError("num_samples must be >= 1")
    gen = torch.Generator().manual_seed(seed)
    z = torch.randn(num_samples, latent_dim, generator=gen)
    c = 0 if class_distribution is None else len(class_distribution)
    y = torch.zeros(num_samples, c)
    if c:
        if fixed_class is not None:
            classes = torch.full((num_samples,), int(fixed_class), dtype=torch.long)
        else:
            probs = torch.as_tensor(class_distribution, dtype=torch.float64)
            classes = torch.multinomial(probs, num_samples, replacement=True, generator=gen)
        y[torch.arange(num_samples), classes] = 1.0
    with torch.no_grad():
        w = build_conditional_latent(z, y, r, mapping)
    return w.double().mean(dim=0).to(w.dtype)


def generator_center_of_mass(generator, num_samples: int = DEFAULT_CENTER_SAMPLES, seed: int = 0,
                             per_class: bool = True, class_distribution=None) -> torch.Tensor:
    """Global center (d,) or, for conditional generators with ``per_class``, a c x d stack."""
    c, d = generator.num_classes, generator.latent_dim
    if c == 0:
        return latent_center_of_mass(generator.mapping, None, None, num_samples, seed, d)
    if class_distribution is None:
        class_distribution = [1.0 / c] * c
    if not per_class:
        return latent_center_of_mass(generator.mapping, generator.r, class_distribution, num_samples, seed, d)
    return torch.stack([
        latent_center_of_mass(generator.mapping, generator.r, class_distribution, num_samples, seed, d, fixed_class=k)
        for k in range(c)
    ])


def centers_for_rows(centers: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Expand a global (d,) or per-class (c x d) center to one row per latent."""
    if centers.ndim == 1:
        return centers.expand(y.shape[0], -1)
    return y.to(centers.dtype) @ centers


def center_of_mass_for_rows(generator, y: torch.Tensor, num_samples: int = DEFAULT_CENTER_SAMPLES,
                            seed: int = 0) -> torch.Tensor:
    return centers_for_rows(generator_center_of_mass(generator, num_samples, seed), y)
