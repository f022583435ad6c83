"""Shared building blocks: instance encoders, input normalisation, augmentation."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

MEAN = (0.70, 0.40, 0.36)
STD = (0.15, 0.12, 0.12)


class NumericFailure(RuntimeError):
    """Raised when a training loss becomes NaN or infinite."""


def check_finite(loss: torch.Tensor, where: str) -> None:
    if not torch.isfinite(loss).all():
        raise NumericFailure(f"non-finite loss ({loss.detach().flatten()[0].item()}) at {where}")


def to_input(pixels: np.ndarray | torch.Tensor, dtype=torch.float32) -> torch.Tensor:
    """uint8 (..., H, W, 3) or (..., 3, H, W) tensor -> normalised float (..., 3, H, W)."""
    t = torch.as_tensor(pixels)
    if t.shape[-1] == 3 and t.shape[-3] != 3:
        t = t.movedim(-1, -3)
    x = t.to(dtype) / 255.0
    mean = torch.tensor(MEAN, dtype=dtype).view(3, 1, 1)
    std = torch.tensor(STD, dtype=dtype).view(3, 1, 1)
    # movedim leaves a channels-last view; some CPU conv kernels crash on it in backward
    return ((x - mean) / std).contiguous()


@dataclass
class EncoderConfig:
    kind: str = "conv4"
    channels: tuple[int, ...] = (16, 32, 64, 128)
    out_dim: int = 128
    pool: str = "max"  # avg | max | avgmax

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d


class _Block(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=2, padding=1, bias=False)
        self.gn1 = nn.GroupNorm(min(4, cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.gn2 = nn.GroupNorm(min(4, cout), cout)
        self.skip = nn.Conv2d(cin, cout, 1, stride=2, bias=False)

    def forward(self, x):
        y = F.relu(self.gn1(self.conv1(x)))
        y = self.gn2(self.conv2(y))
        return F.relu(y + self.skip(x))


class ConvEncoder(nn.Module):
    """Stride-2 residual blocks followed by global average pooling."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        chans = (3,) + tuple(cfg.channels)
        self.blocks = nn.Sequential(*[_Block(a, b) for a, b in zip(chans[:-1], chans[1:])])
        if cfg.pool not in ("avg", "max", "avgmax"):
            raise ValueError(f"unknown pooling {cfg.pool!r}")
        self.pool = cfg.pool
        width = chans[-1] * (2 if cfg.pool == "avgmax" else 1)
        self.proj = nn.Identity() if width == cfg.out_dim else nn.Linear(width, cfg.out_dim)
        self.out_dim = cfg.out_dim

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.blocks(x)
        if self.pool == "avg":
            z = y.mean(dim=(2, 3))
        elif self.pool == "max":
            z = y.amax(dim=(2, 3))
        else:
            z = torch.cat([y.mean(dim=(2, 3)), y.amax(dim=(2, 3))], dim=1)
        return self.proj(z)


class ResNet18Encoder(nn.Module):
    """torchvision ResNet-18 trunk without its classifier (random init)."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        from torchvision.models import resnet18

        net = resnet18(weights=None)
        net.fc = nn.Identity()
        self.net = net
        self.proj = nn.Identity() if cfg.out_dim == 512 else nn.Linear(512, cfg.out_dim)
        self.out_dim = cfg.out_dim

    def forward(self, x):
        return self.proj(self.net(x))


def build_encoder(cfg: EncoderConfig) -> nn.Module:
    if cfg.kind == "conv4":
        return ConvEncoder(cfg)
    if cfg.kind == "resnet18":
        return ResNet18Encoder(cfg)
    raise ValueError(f"unknown encoder kind {cfg.kind!r}")


@dataclass
class AugmentConfig:
    crop_scale: tuple[float, float] = (0.8, 1.0)
    crop_ratio: tuple[float, float] = (3 / 4, 4 / 3)
    hflip: bool = True
    vflip: bool = True
    enabled: bool = True


def random_resized_crop_params(rng: np.random.Generator, h: int, w: int, scale, ratio):
    area = h * w
    for _ in range(10):
        target = area * rng.uniform(*scale)
        log_r = rng.uniform(np.log(ratio[0]), np.log(ratio[1]))
        ar = float(np.exp(log_r))
        cw = int(round(np.sqrt(target * ar)))
        ch = int(round(np.sqrt(target / ar)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return top, left, ch, cw
    return 0, 0, h, w


def augment(x: torch.Tensor, rng: np.random.Generator, cfg: AugmentConfig) -> torch.Tensor:
    """Per-image random resized crop and flips on a (B, 3, H, W) batch."""
    if not cfg.enabled:
        return x
    b, _, h, w = x.shape
    out = torch.empty_like(x)
    for i in range(b):
        top, left, ch, cw = random_resized_crop_params(rng, h, w, cfg.crop_scale, cfg.crop_ratio)
        img = x[i : i + 1, :, top : top + ch, left : left + cw]
        if (ch, cw) != (h, w):
            img = F.interpolate(img, size=(h, w), mode="bilinear", align_corners=False)
        if cfg.hflip and rng.random() < 0.5:
            img = img.flip(-1)
        if cfg.vflip and rng.random() < 0.5:
            img = img.flip(-2)
        out[i] = img[0]
    return out


def seed_everything(seed: int) -> np.random.Generator:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)
    return np.random.default_rng(seed)
