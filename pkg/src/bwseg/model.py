"""4-level 3D U-Net with a two-class softmax head or a scalar SDT head."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

OUT_MODES = ("two_class_softmax", "sdt_scalar")


@dataclass
class UNetConfig:
    levels: int = 4
    base_width: int = 32
    in_channels: int = 1
    out_mode: str = "two_class_softmax"

    def __post_init__(self):
        if self.out_mode not in OUT_MODES:
            raise ValueError(f"out_mode must be one of {OUT_MODES}, got {self.out_mode!r}")
        if self.levels < 1 or self.base_width < 1 or self.in_channels < 1:
            raise ValueError("levels, base_width and in_channels must be positive")

    @property
    def widths(self) -> list[int]:
        return [self.base_width * 2**i for i in range(self.levels)]

    @property
    def out_channels(self) -> int:
        return 2 if self.out_mode == "two_class_softmax" else 1

    @property
    def divisor(self) -> int:
        return 2**self.levels

    def to_dict(self) -> dict:
        return asdict(self)


def conv_block(cin: int, cout: int) -> nn.Sequential:
    """Two (3x3x3 conv -> BatchNorm -> ReLU) units."""
    return nn.Sequential(
        nn.Conv3d(cin, cout, 3, padding=1),
        nn.BatchNorm3d(cout),
        nn.ReLU(inplace=True),
        nn.Conv3d(cout, cout, 3, padding=1),
        nn.BatchNorm3d(cout),
        nn.ReLU(inplace=True),
    )


class UNet3D(nn.Module):
    """Encoder blocks at widths w, 2w, ..., each followed by 2x max pooling;
    a bottleneck block at the deepest width; transposed-conv upsampling with
    concatenated skips on the way back up."""

    def __init__(self, config: UNetConfig):
        super().__init__()
        self.config = config
        widths = config.widths
        self.encoders = nn.ModuleList()
        c = config.in_channels
        for w in widths:
            self.encoders.append(conv_block(c, w))
            c = w
        self.bottleneck = conv_block(c, c)
        self.upsamplers = nn.ModuleList()
        self.decoders = nn.ModuleList()
        for w in reversed(widths):
            self.upsamplers.append(nn.ConvTranspose3d(c, w, 2, stride=2))
            self.decoders.append(conv_block(2 * w, w))
            c = w
        self.head = nn.Conv3d(c, config.out_channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        d = self.config.divisor
        if x.ndim != 5 or x.shape[1] != self.config.in_channels:
            raise ValueError(f"expected (B, {self.config.in_channels}, H, W, D) input, got {tuple(x.shape)}")
        if any(s % d for s in x.shape[2:]):
            raise ValueError(f"spatial dims {tuple(x.shape[2:])} must be divisible by {d}")
        skips = []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
            x = F.max_pool3d(x, 2)
        x = self.bottleneck(x)
        for up, dec in zip(self.upsamplers, self.decoders):
            x = dec(torch.cat([up(x), skips.pop()], dim=1))
        return self.head(x)


def build_unet(config: UNetConfig | None = None, seed: Optional[int] = None) -> UNet3D:
    """Build the network; with ``seed`` the initialization is reproducible.

    PyTorch's default fan-in scaled uniform init is kept; BatchNorm starts
    as the identity.
    """
    config = config or UNetConfig()
    if seed is None:
        return UNet3D(config)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return UNet3D(config)


def parameter_count(config: UNetConfig) -> int:
    """Closed-form number of trainable parameters of :class:`UNet3D`."""

    def conv(cin, cout, k):
        return k**3 * cin * cout + cout

    def block(cin, cout):
        return conv(cin, cout, 3) + 2 * cout + conv(cout, cout, 3) + 2 * cout

    widths = config.widths
    total = 0
    c = config.in_channels
    for w in widths:
        total += block(c, w)
        c = w
    total += block(c, c)
    for w in reversed(widths):
        total += conv(c, w, 2) + block(2 * w, w)
        c = w
    return total + conv(c, config.out_channels, 1)


def heaviside(z: torch.Tensor, scale: float = 1.0) -> torch.Tensor:
    """Smoothed Heaviside 1/2 (1 + 2/pi arctan(z / scale))."""
    return 0.5 * (1 + (2 / math.pi) * torch.atan(z / scale))


def foreground_probability(output: torch.Tensor, mode: str, scale: float = 1.0) -> torch.Tensor:
    """Foreground probability (B, H, W, D) from raw network output.

    In sdt mode the regressed distance is mapped through the smoothed
    Heaviside, so p >= 0.5 exactly where the predicted distance is >= 0.
    """
    if mode == "probability":
        return torch.softmax(output, dim=1)[:, 1]
    if mode == "sdt":
        return heaviside(output[:, 0], scale)
    raise ValueError(f"unknown prediction mode {mode!r}")


def output_mode(config: UNetConfig) -> str:
    return "probability" if config.out_mode == "two_class_softmax" else "sdt"


# -- checkpoints -------------------------------------------------------------


@dataclass
class Checkpoint:
    config: UNetConfig
    state_dict: dict
    epoch: int = -1
    val_dice: float = float("nan")
    optimizer_state: Optional[dict] = None
    rng_state: Optional[Any] = None
    extra: Optional[dict] = None

    def network(self) -> UNet3D:
        net = UNet3D(self.config)
        net.load_state_dict(self.state_dict)
        net.eval()
        return net


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "config": ckpt.config.to_dict(),
            "state_dict": ckpt.state_dict,
            "epoch": ckpt.epoch,
            "val_dice": ckpt.val_dice,
            "optimizer_state": ckpt.optimizer_state,
            "rng_state": ckpt.rng_state,
            "extra": ckpt.extra,
        },
        path,
    )


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such checkpoint: {path}")
    blob = torch.load(path, map_location="cpu", weights_only=False)
    return Checkpoint(
        UNetConfig(**blob["config"]),
        blob["state_dict"],
        blob["epoch"],
        blob["val_dice"],
        blob.get("optimizer_state"),
        blob.get("rng_state"),
        blob.get("extra"),
    )
