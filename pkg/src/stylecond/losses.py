"""Conditional WGAN-GP objective terms."""

from __future__ import annotations

from typing import Callable, Optional

import torch

Critic = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


def wgan_d_loss(real_scores: torch.Tensor, fake_scores: torch.Tensor) -> torch.Tensor:
    """Critic objective to minimize: mean D(fake|y) - mean D(real|y)."""
    if real_scores.shape[0] != fake_scores.shape[0]:
        raise ValueError("real and fake score batches differ in size")
    return fake_scores.mean() - real_scores.mean()


def wgan_g_loss(fake_scores: torch.Tensor) -> torch.Tensor:
    if fake_scores.numel() == 0:
        raise ValueError("empty score batch")
    return -fake_scores.mean()


def interpolate(real: torch.Tensor, fake: torch.Tensor, generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """x_hat = eps * real + (1 - eps) * fake with one eps ~ U[0, 1] per sample."""
    if real.shape != fake.shape:
        raise ValueError(f"real {tuple(real.shape)} and fake {tuple(fake.shape)} batches differ")
    eps = torch.rand(real.shape[0], *([1] * (real.ndim - 1)), generator=generator, dtype=real.dtype)
    return eps * real + (1.0 - eps) * fake


def critic_gradient_norms(critic: Critic, x_hat: torch.Tensor, y: torch.Tensor, create_graph: bool = True) -> torch.Tensor:
    """Per-sample L2 norm of dD(x_hat|y)/dx_hat, taken w.r.t. the image only."""
    x_hat = x_hat.detach().requires_grad_(True)
    scores = critic(x_hat, y)
    (grad,) = torch.autograd.grad(scores.sum(), x_hat, create_graph=create_graph)
    return grad.flatten(1).norm(2, dim=1)


def gradient_penalty(critic: Critic, real: torch.Tensor, fake: torch.Tensor, y: torch.Tensor, lam: float = 10.0,
                     generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """lam * mean((||grad D(x_hat|y)|| - 1)^2) on random real/fake interpolates."""
    if lam < 0:
        raise ValueError("penalty weight must be >= 0")
    x_hat = interpolate(real.detach(), fake.detach(), generator)
    if lam == 0:
        return torch.zeros((), dtype=real.dtype)
    norms = critic_gradient_norms(critic, x_hat, y)
    return lam * ((norms - 1.0) ** 2).mean()
