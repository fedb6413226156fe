"""Class-conditional style-based generator and progressive critic."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .config import GeneratorConfig
from .truncation import center_of_mass_for_rows, truncate_latent

LRELU_SLOPE = 0.2
ADAIN_EPS = 1e-8


class ModelError(ValueError):
    pass


# --------------------------------------------------------------------------- functional ops


def check_one_hot(y: torch.Tensor) -> None:
    if y.ndim != 2:
        raise ModelError(f"Y must be n x c, got shape {tuple(y.shape)}")
    if y.shape[1] == 0:
        return
    binary = torch.all((y == 0) | (y == 1))
    if not binary or not torch.all(y.sum(dim=1) == 1):
        raise ModelError("Y rows must be one-hot")


def build_conditional_latent(z: torch.Tensor, y: torch.Tensor, r: Optional[torch.Tensor],
                             mapping: Callable[[torch.Tensor], torch.Tensor]) -> torch.Tensor:
    """W = f([Y R] ++ Z): class embeddings selected by Y, concatenated before Z.

    With zero classes the condition part vanishes and W = f(Z).
    """
    if z.ndim != 2:
        raise ModelError(f"Z must be n x d, got shape {tuple(z.shape)}")
    check_one_hot(y)
    if y.shape[0] != z.shape[0]:
        raise ModelError(f"Z has {z.shape[0]} rows but Y has {y.shape[0]}")
    c = y.shape[1]
    if c == 0:
        x = z
    else:
        if r is None or r.shape[0] != c:
            raise ModelError(f"class embedding must have {c} rows")
        x = torch.cat([y.to(r.dtype) @ r, z], dim=1)
    expected = getattr(mapping, "in_features", None)
    if expected is not None and expected != x.shape[1]:
        raise ModelError(f"mapping expects width {expected}, got {x.shape[1]}")
    w = mapping(x)
    if w.shape != z.shape:
        raise ModelError(f"mapping output {tuple(w.shape)} does not match Z {tuple(z.shape)}")
    return w


def adain(x: torch.Tensor, scale: torch.Tensor, bias: torch.Tensor, eps: float = ADAIN_EPS) -> torch.Tensor:
    """scale * (x - mean(x)) / std(x) + bias, statistics per sample and channel."""
    if scale.shape != x.shape[:2] or bias.shape != x.shape[:2]:
        raise ModelError(f"style {tuple(scale.shape)} does not match feature map {tuple(x.shape)}")
    mu = x.mean(dim=(2, 3), keepdim=True)
    var = x.var(dim=(2, 3), keepdim=True, unbiased=False)
    return scale[:, :, None, None] * (x - mu) / torch.sqrt(var + eps) + bias[:, :, None, None]


def apply_noise(x: torch.Tensor, noise: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    """x + scale_c * noise, one single-channel noise map broadcast over channels."""
    if noise.ndim != 4 or noise.shape[1] != 1 or noise.shape[2:] != x.shape[2:] or noise.shape[0] not in (1, x.shape[0]):
        raise ModelError(f"noise {tuple(noise.shape)} does not fit feature map {tuple(x.shape)}")
    return x + scale.view(1, -1, 1, 1) * noise


def progressive_blend(low: torch.Tensor, high: torch.Tensor, alpha: float) -> torch.Tensor:
    if not 0.0 <= alpha <= 1.0:
        raise ModelError(f"alpha must lie in [0, 1], got {alpha}")
    if low.shape != high.shape:
        raise ModelError(f"cannot blend {tuple(low.shape)} with {tuple(high.shape)}")
    return (1.0 - alpha) * low + alpha * high


def pixel_norm(x: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    return x * torch.rsqrt(x.pow(2).mean(dim=1, keepdim=True) + eps)


# --------------------------------------------------------------------------- layers


class EqualLinear(nn.Module):
    """Linear layer; with ``equalized`` the He scale is applied at runtime."""

    def __init__(self, in_features, out_features, gain=1.0, bias_init=0.0, equalized=True):
        super().__init__()
        self.in_features, self.out_features = in_features, out_features
        he = gain / math.sqrt(in_features)
        self.weight = nn.Parameter(torch.randn(out_features, in_features) * (1.0 if equalized else he))
        self.scale = he if equalized else 1.0
        self.bias = nn.Parameter(torch.full((out_features,), float(bias_init)))

    def forward(self, x):
        return F.linear(x, self.weight * self.scale, self.bias)


class EqualConv2d(nn.Module):
    def __init__(self, in_channels, out_channels, kernel_size, gain=math.sqrt(2), equalized=True):
        super().__init__()
        he = gain / math.sqrt(in_channels * kernel_size**2)
        self.weight = nn.Parameter(torch.randn(out_channels, in_channels, kernel_size, kernel_size) * (1.0 if equalized else he))
        self.scale = he if equalized else 1.0
        self.bias = nn.Parameter(torch.zeros(out_channels))
        self.padding = kernel_size // 2

    def forward(self, x):
        return F.conv2d(x, self.weight * self.scale, self.bias, padding=self.padding)


class MappingNetwork(nn.Module):
    """Fully connected leaky-ReLU stack from ``[Y R] ++ Z`` to W.

    The trailing ``latent_dim`` input columns are Z; they are pixel-normalized
    first when ``normalize_z`` is set.
    """

    def __init__(self, latent_dim, cond_dim, depth, normalize_z=True, equalized=True):
        super().__init__()
        self.latent_dim = latent_dim
        self.in_features = latent_dim + cond_dim
        self.normalize_z = normalize_z
        dims = [self.in_features] + [latent_dim] * depth
        self.layers = nn.ModuleList(EqualLinear(a, b, gain=math.sqrt(2), equalized=equalized)
                                    for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, x):
        if self.normalize_z:
            d = self.latent_dim
            x = torch.cat([x[:, :-d], pixel_norm(x[:, -d:])], dim=1)
        for layer in self.layers:
            x = F.leaky_relu(layer(x), LRELU_SLOPE)
        return x


class ClassEmbedding(nn.Module):
    """Frozen c x e matrix R drawn once from N(0, 1)."""

    def __init__(self, num_classes, embed_dim, seed):
        super().__init__()
        self.seed = seed
        gen = torch.Generator().manual_seed(seed)
        while True:
            r = torch.randn(num_classes, embed_dim, generator=gen)
            if num_classes < 2 or len(torch.unique(r, dim=0)) == num_classes:
                break
        self.register_buffer("r", r)


class StyleAffine(nn.Module):
    """W -> (scale, bias) for one AdaIN site; scale starts around 1."""

    def __init__(self, w_dim, channels, equalized=True):
        super().__init__()
        self.scale = EqualLinear(w_dim, channels, bias_init=1.0, equalized=equalized)
        self.bias = EqualLinear(w_dim, channels, bias_init=0.0, equalized=equalized)

    def forward(self, w):
        return self.scale(w), self.bias(w)


class StyledLayer(nn.Module):
    """[upsample] -> [conv] -> noise -> bias + lrelu -> AdaIN."""

    def __init__(self, in_ch, out_ch, w_dim, conv=True, upsample=False, equalized=True):
        super().__init__()
        self.upsample = upsample
        self.conv = EqualConv2d(in_ch, out_ch, 3, equalized=equalized) if conv else None
        self.noise_scale = nn.Parameter(torch.zeros(out_ch))
        self.bias = nn.Parameter(torch.zeros(out_ch))
        self.style = StyleAffine(w_dim, out_ch, equalized)

    def forward(self, x, w, noise=None):
        if self.upsample:
            x = F.interpolate(x, scale_factor=2, mode="nearest")
        if self.conv is not None:
            x = self.conv(x)
        if noise is not None:
            x = apply_noise(x, noise, self.noise_scale)
        x = F.leaky_relu(x + self.bias.view(1, -1, 1, 1), LRELU_SLOPE)
        scale, bias = self.style(w)
        return adain(x, scale, bias)


class Generator(nn.Module):
    def __init__(self, config: GeneratorConfig, seed: int = 0):
        super().__init__()
        self.config = config
        ch = config.channel_map()
        d, c, e = config.latent_dim, config.classes, config.class_embed_dim
        eq = config.equalized_lr
        self.class_embedding = ClassEmbedding(c, e, seed) if c else None
        self.mapping = MappingNetwork(d, e, config.mapping_depth, config.pixel_norm, eq)
        self.const = nn.Parameter(torch.ones(1, ch[4], 4, 4))
        blocks = [nn.ModuleList([StyledLayer(ch[4], ch[4], d, conv=False, equalized=eq),
                                 StyledLayer(ch[4], ch[4], d, equalized=eq)])]
        for lo, hi in zip(config.resolutions[:-1], config.resolutions[1:]):
            blocks.append(nn.ModuleList([StyledLayer(ch[lo], ch[hi], d, upsample=True, equalized=eq),
                                         StyledLayer(ch[hi], ch[hi], d, equalized=eq)]))
        self.blocks = nn.ModuleList(blocks)
        self.to_rgb = nn.ModuleList(EqualConv2d(ch[res], 3, 1, gain=1.0, equalized=eq) for res in config.resolutions)

    @property
    def num_classes(self) -> int:
        return self.config.classes

    @property
    def latent_dim(self) -> int:
        return self.config.latent_dim

    @property
    def r(self) -> Optional[torch.Tensor]:
        return None if self.class_embedding is None else self.class_embedding.r

    def map(self, z: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        return build_conditional_latent(z, y, self.r, self.mapping)

    def make_noise(self, n: int, phase: int, seed: int, shared: bool = False) -> Optional[list[torch.Tensor]]:
        """Two single-channel noise maps per resolution up to ``phase``.

        ``shared`` draws one map per site for the whole batch.
        """
        if not self.config.noise_enabled:
            return None
        gen = torch.Generator().manual_seed(seed)
        rows = 1 if shared else n
        maps = []
        for p in range(phase + 1):
            res = 4 * 2**p
            maps.append([torch.randn(rows, 1, res, res, generator=gen) for _ in range(2)])
        return maps

    def synthesize(self, w: torch.Tensor, noise, phase: int, alpha: float = 1.0) -> torch.Tensor:
        if not 0 <= phase <= self.config.max_phase:
            raise ModelError(f"phase {phase} outside [0, {self.config.max_phase}]")
        x = self.const.expand(w.shape[0], -1, -1, -1)
        prev = None
        for p in range(phase + 1):
            site = noise[p] if noise is not None else (None, None)
            prev = x
            for layer, nz in zip(self.blocks[p], site):
                x = layer(x, w, nz)
        rgb = self.to_rgb[phase](x)
        if phase > 0 and alpha < 1.0:
            low = F.interpolate(self.to_rgb[phase - 1](prev), scale_factor=2, mode="nearest")
            rgb = progressive_blend(low, rgb, alpha)
        return torch.tanh(rgb)


class DownBlock(nn.Module):
    def __init__(self, in_ch, out_ch, equalized=True):
        super().__init__()
        self.conv1 = EqualConv2d(in_ch, in_ch, 3, equalized=equalized)
        self.conv2 = EqualConv2d(in_ch, out_ch, 3, equalized=equalized)

    def forward(self, x):
        x = F.leaky_relu(self.conv1(x), LRELU_SLOPE)
        x = F.leaky_relu(self.conv2(x), LRELU_SLOPE)
        return F.avg_pool2d(x, 2)


class CriticHead(nn.Module):
    def __init__(self, ch, equalized=True):
        super().__init__()
        self.conv = EqualConv2d(ch, ch, 3, equalized=equalized)
        self.fc = EqualLinear(ch * 16, ch, gain=math.sqrt(2), equalized=equalized)
        self.out = EqualLinear(ch, 1, equalized=equalized)

    def forward(self, x):
        x = F.leaky_relu(self.conv(x), LRELU_SLOPE)
        x = F.leaky_relu(self.fc(x.flatten(1)), LRELU_SLOPE)
        return self.out(x).squeeze(1)


class Discriminator(nn.Module):
    """Progressive critic; the one-hot condition enters as constant input maps."""

    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        ch = config.channel_map()
        c, eq = config.classes, config.equalized_lr
        self.from_rgb = nn.ModuleList(EqualConv2d(3 + c, ch[res], 1, equalized=eq) for res in config.resolutions)
        blocks = [CriticHead(ch[4], eq)]
        for lo, hi in zip(config.resolutions[:-1], config.resolutions[1:]):
            blocks.append(DownBlock(ch[hi], ch[lo], eq))
        self.blocks = nn.ModuleList(blocks)

    def _input(self, images, y, phase):
        return F.leaky_relu(self.from_rgb[phase](_with_condition_maps(images, y)), LRELU_SLOPE)

    def forward(self, images: torch.Tensor, y: torch.Tensor, phase: int, alpha: float = 1.0) -> torch.Tensor:
        if not 0 <= phase <= self.config.max_phase:
            raise ModelError(f"phase {phase} outside [0, {self.config.max_phase}]")
        res = 4 * 2**phase
        if images.ndim != 4 or images.shape[1:] != (3, res, res):
            raise ModelError(f"expected n x 3 x {res} x {res} images at phase {phase}, got {tuple(images.shape)}")
        check_one_hot(y)
        if y.shape != (images.shape[0], self.config.classes):
            raise ModelError(f"Y shape {tuple(y.shape)} does not match {images.shape[0]} x {self.config.classes}")
        h = self._input(images, y, phase)
        if phase > 0:
            h = self.blocks[phase](h)
            if alpha < 1.0:
                low = self._input(F.avg_pool2d(images, 2), y, phase - 1)
                h = progressive_blend(low, h, alpha)
        for p in range(phase - 1, 0, -1):
            h = self.blocks[p](h)
        return self.blocks[0](h)


def _with_condition_maps(images: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    if y.shape[1] == 0:
        return images
    n, _, h, w = images.shape
    maps = y.to(images.dtype)[:, :, None, None].expand(n, y.shape[1], h, w)
    return torch.cat([images, maps], dim=1)


# --------------------------------------------------------------------------- model pair


@dataclass
class LatentBatch:
    z: torch.Tensor
    y: torch.Tensor
    w: Optional[torch.Tensor] = None

    def __post_init__(self):
        check_one_hot(self.y)
        if self.z.shape[0] != self.y.shape[0]:
            raise ModelError("Z and Y row counts differ")

    @classmethod
    def sample(cls, n: int, latent_dim: int, labels: Sequence[int], num_classes: int, seed: int) -> "LatentBatch":
        gen = torch.Generator().manual_seed(seed)
        z = torch.randn(n, latent_dim, generator=gen)
        y = torch.zeros(n, num_classes)
        if num_classes:
            y[torch.arange(n), torch.as_tensor(list(labels), dtype=torch.long)] = 1.0
        return cls(z, y)


@dataclass
class ModelPair:
    generator: Generator
    discriminator: Discriminator
    config: GeneratorConfig
    seed: int = 0
    phase: int = 0
    alpha: float = 1.0

    @classmethod
    def create(cls, config: GeneratorConfig, seed: int = 0) -> "ModelPair":
        config.validate()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            g = Generator(config, seed)
            d = Discriminator(config)
        return cls(g, d, config, seed)


def generator_forward(model: ModelPair, latents: LatentBatch, noise_seed: int, phase: int, alpha: float = 1.0,
                      psi: Optional[float] = None, w_avg: Optional[torch.Tensor] = None,
                      shared_noise: bool = False) -> torch.Tensor:
    """Images n x 3 x res x res in [-1, 1] with res = 4 * 2**phase.

    With ``psi`` the mapped latents are pulled toward ``w_avg`` first; when no
    center is given one is estimated per row class (seed 0).
    """
    g = model.generator
    if phase > g.config.max_phase:
        raise ModelError(f"phase {phase} beyond max phase {g.config.max_phase}")
    w = latents.w if latents.w is not None else g.map(latents.z, latents.y)
    if psi is not None:
        if w_avg is None:
            w_avg = center_of_mass_for_rows(g, latents.y)
        w = truncate_latent(w, w_avg, psi)
    noise = g.make_noise(w.shape[0], phase, noise_seed, shared=shared_noise)
    return g.synthesize(w, noise, phase, alpha)


def discriminator_forward(model: ModelPair, images: torch.Tensor, y: torch.Tensor, phase: int,
                          alpha: float = 1.0) -> torch.Tensor:
    return model.discriminator(images, y, phase, alpha)
