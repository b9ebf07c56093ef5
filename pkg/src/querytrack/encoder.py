"""Hybrid encoder bridging the neck to the decoder.

Projects the three pyramid levels to a common width, runs one standard
self-attention block (with 2-D sine positions) on the coarsest map only,
fuses scales top-down/bottom-up, then flattens everything into a single
memory sequence with per-level offsets.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .backbone import FeaturePyramid
from .layers import CSPBlock, ConvBNAct, FeedForward, MultiHeadSelfAttention


def sine_position_embedding(
    h: int, w: int, dim: int, temperature: float = 10000.0, dtype: torch.dtype = torch.float32
) -> Tensor:
    """2-D sine/cosine positional grid, [h*w, dim], values in [-1, 1].

    Row-major flattening (y outer, x inner), matching flattened feature maps.
    """
    if dim % 4 != 0:
        raise ValueError(f"position embedding dim {dim} must be divisible by 4")
    quarter = dim // 4
    omega = 1.0 / temperature ** (torch.arange(quarter, dtype=dtype) / quarter)
    ys, xs = torch.meshgrid(
        torch.arange(h, dtype=dtype), torch.arange(w, dtype=dtype), indexing="ij"
    )
    out_x = xs.flatten()[:, None] * omega[None, :]
    out_y = ys.flatten()[:, None] * omega[None, :]
    return torch.cat([out_x.sin(), out_x.cos(), out_y.sin(), out_y.cos()], dim=1)


@dataclass
class EncoderMemory:
    """Flattened multi-scale features plus the geometry needed to index them.

    ``level_offsets`` partition ``memory`` exactly; levels are ordered by
    stride (8, 16, 32). ``valid_ratios`` is all ones at desk scale (no
    padding is ever introduced).
    """

    memory: Tensor  # [B, S, D]
    spatial_shapes: tuple[tuple[int, int], ...]
    level_offsets: tuple[int, ...]
    valid_ratios: Tensor  # [B, L, 2]

    def __post_init__(self) -> None:
        sizes = [h * w for h, w in self.spatial_shapes]
        offsets = [0]
        for s in sizes[:-1]:
            offsets.append(offsets[-1] + s)
        if tuple(offsets) != tuple(self.level_offsets):
            raise ValueError(f"level offsets {self.level_offsets} do not partition {sizes}")
        if sum(sizes) != self.memory.shape[1]:
            raise ValueError("memory length does not match spatial shapes")


class AttentionBlock(nn.Module):
    """Post-norm transformer block: self-attention with positions, then FFN."""

    def __init__(self, dim: int, num_heads: int = 8, ffn_ratio: int = 4):
        super().__init__()
        self.attn = MultiHeadSelfAttention(dim, num_heads)
        self.norm1 = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_ratio, act=nn.GELU())
        self.norm2 = nn.LayerNorm(dim)

    def forward(self, src: Tensor, pos: Tensor | None = None, return_weights: bool = False):
        q = src if pos is None else src + pos
        attn_out, weights = self.attn(q, q, src, return_weights=True)
        h = self.norm1(src + attn_out)
        out = self.norm2(h + self.ffn(h))
        if return_weights:
            return out, weights
        return out


class HybridEncoder(nn.Module):
    """Intra-scale attention on the stride-32 map + cross-scale fusion."""

    def __init__(self, in_channels: tuple[int, int, int] = (128, 256, 256), dim: int = 256,
                 num_heads: int = 8, ffn_ratio: int = 4):
        super().__init__()
        self.dim = dim
        self.proj = nn.ModuleList(
            nn.Sequential(nn.Conv2d(c, dim, 1, bias=False), nn.BatchNorm2d(dim))
            for c in in_channels
        )
        self.aifi = AttentionBlock(dim, num_heads, ffn_ratio)
        self.td4 = CSPBlock(2 * dim, dim, depth=1, shortcut=False)
        self.td3 = CSPBlock(2 * dim, dim, depth=1, shortcut=False)
        self.down3 = ConvBNAct(dim, dim, 3, stride=2)
        self.bu4 = CSPBlock(2 * dim, dim, depth=1, shortcut=False)
        self.down4 = ConvBNAct(dim, dim, 3, stride=2)
        self.bu5 = CSPBlock(2 * dim, dim, depth=1, shortcut=False)

    def forward(self, pyr: FeaturePyramid) -> EncoderMemory:
        return self.encode(pyr)

    def encode(self, pyr: FeaturePyramid) -> EncoderMemory:
        p3, p4, p5 = (proj(m) for proj, m in zip(self.proj, pyr.maps))

        b, d, h5, w5 = p5.shape
        tokens = p5.flatten(2).transpose(1, 2)  # [B, h5*w5, D]
        pos = sine_position_embedding(h5, w5, d, dtype=p5.dtype).to(p5.device)
        tokens = self.aifi(tokens, pos[None])
        p5 = tokens.transpose(1, 2).reshape(b, d, h5, w5)

        up = lambda t: nn.functional.interpolate(t, scale_factor=2.0, mode="nearest")
        f4 = self.td4(torch.cat([up(p5), p4], dim=1))
        f3 = self.td3(torch.cat([up(f4), p3], dim=1))
        g4 = self.bu4(torch.cat([self.down3(f3), f4], dim=1))
        g5 = self.bu5(torch.cat([self.down4(g4), p5], dim=1))

        levels = (f3, g4, g5)
        shapes = tuple((m.shape[2], m.shape[3]) for m in levels)
        offsets = (0, shapes[0][0] * shapes[0][1], shapes[0][0] * shapes[0][1] + shapes[1][0] * shapes[1][1])
        memory = torch.cat([m.flatten(2).transpose(1, 2) for m in levels], dim=1)
        valid = torch.ones(b, len(levels), 2, dtype=memory.dtype, device=memory.device)
        return EncoderMemory(memory=memory, spatial_shapes=shapes, level_offsets=offsets, valid_ratios=valid)
