"""Convolutional trunk: CSP-style backbone plus top-down/bottom-up fusion neck.

Turns a normalized image into three feature maps at strides 8/16/32. Depth
and width are configuration; stride geometry is fixed by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .layers import ConvBNAct, CSPBlock

STRIDES = (8, 16, 32)


@dataclass(frozen=True)
class BackboneConfig:
    stem_channels: int = 32
    stage_channels: tuple[int, int, int, int] = (64, 128, 256, 256)
    stage_depths: tuple[int, int, int, int] = (1, 2, 2, 1)
    out_channels: tuple[int, int, int] = (128, 256, 256)  # widths at strides 8/16/32

    def scaled(self, width: float = 1.0, depth: float = 1.0) -> "BackboneConfig":
        """Depth/width multipliers; never touches stride geometry."""
        w = lambda c: max(8, int(round(c * width)))
        d = lambda n: max(1, int(round(n * depth)))
        return replace(
            self,
            stem_channels=w(self.stem_channels),
            stage_channels=tuple(w(c) for c in self.stage_channels),
            stage_depths=tuple(d(n) for n in self.stage_depths),
            out_channels=tuple(w(c) for c in self.out_channels),
        )


@dataclass
class FeaturePyramid:
    """Maps at strides 8, 16, 32; spatial size is (H/stride, W/stride) exactly."""

    maps: tuple[Tensor, Tensor, Tensor]
    strides: tuple[int, int, int] = STRIDES

    def __post_init__(self) -> None:
        if len(self.maps) != 3:
            raise ValueError("feature pyramid needs exactly 3 levels")

    @property
    def channels(self) -> tuple[int, ...]:
        return tuple(m.shape[1] for m in self.maps)

    def spatial_shapes(self) -> tuple[tuple[int, int], ...]:
        return tuple((m.shape[2], m.shape[3]) for m in self.maps)


class Backbone(nn.Module):
    """Stem + four stride-2 stages; returns the stride 4/8/16/32 tails."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.stage_channels
        self.stem = ConvBNAct(3, cfg.stem_channels, 3, stride=2)
        self.stages = nn.ModuleList()
        c_prev = cfg.stem_channels
        for c_out, depth in zip(c, cfg.stage_depths):
            self.stages.append(
                nn.Sequential(
                    ConvBNAct(c_prev, c_out, 3, stride=2),
                    CSPBlock(c_out, c_out, depth=depth),
                )
            )
            c_prev = c_out

    def forward(self, x: Tensor) -> list[Tensor]:
        x = self.stem(x)
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats[1:]  # strides 8, 16, 32


class FusionNeck(nn.Module):
    """Top-down then bottom-up feature fusion to the configured output widths."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        c3, c4, c5 = cfg.stage_channels[1:]
        o3, o4, o5 = cfg.out_channels
        self.td4 = CSPBlock(c5 + c4, o4, depth=1, shortcut=False)
        self.td3 = CSPBlock(o4 + c3, o3, depth=1, shortcut=False)
        self.down3 = ConvBNAct(o3, o3, 3, stride=2)
        self.bu4 = CSPBlock(o3 + o4, o4, depth=1, shortcut=False)
        self.down4 = ConvBNAct(o4, o4, 3, stride=2)
        self.bu5 = CSPBlock(o4 + c5, o5, depth=1, shortcut=False)

    def forward(self, feats: list[Tensor]) -> tuple[Tensor, Tensor, Tensor]:
        c3, c4, c5 = feats
        t4 = self.td4(torch.cat([F.interpolate(c5, scale_factor=2.0, mode="nearest"), c4], dim=1))
        t3 = self.td3(torch.cat([F.interpolate(t4, scale_factor=2.0, mode="nearest"), c3], dim=1))
        n4 = self.bu4(torch.cat([self.down3(t3), t4], dim=1))
        n5 = self.bu5(torch.cat([self.down4(n4), c5], dim=1))
        return t3, n4, n5


class BackboneNeck(nn.Module):
    def __init__(self, cfg: BackboneConfig | None = None):
        super().__init__()
        self.cfg = cfg or BackboneConfig()
        self.backbone = Backbone(self.cfg)
        self.neck = FusionNeck(self.cfg)

    def forward(self, image: Tensor) -> FeaturePyramid:
        return self.extract_features(image)

    def extract_features(self, image: Tensor) -> FeaturePyramid:
        """Image [B, 3, H, W] with H, W multiples of 32 -> three-scale pyramid."""
        if image.ndim != 4 or image.shape[1] != 3:
            raise ValueError(f"expected [B, 3, H, W] image tensor, got {tuple(image.shape)}")
        h, w = image.shape[2], image.shape[3]
        if h % 32 != 0 or w % 32 != 0:
            raise ValueError(f"image size {h}x{w} must be a multiple of 32")
        maps = self.neck(self.backbone(image))
        for m, stride in zip(maps, STRIDES):
            expected = (h // stride, w // stride)
            if tuple(m.shape[2:]) != expected:
                raise AssertionError(f"stride {stride} map {tuple(m.shape[2:])} != {expected}")
        return FeaturePyramid(maps=maps)
