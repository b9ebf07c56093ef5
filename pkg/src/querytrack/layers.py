"""Small reusable network blocks: conv-bn-act, CSP bottlenecks, attention, MLP."""

from __future__ import annotations

import torch
from torch import Tensor, nn


class ConvBNAct(nn.Module):
    """3x3/1x1 convolution + per-channel batch statistics + SiLU."""

    def __init__(self, c_in: int, c_out: int, kernel: int = 3, stride: int = 1, act: bool = True):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, kernel, stride, padding=kernel // 2, bias=False)
        self.bn = nn.BatchNorm2d(c_out)
        self.act = nn.SiLU() if act else nn.Identity()

    def forward(self, x: Tensor) -> Tensor:
        return self.act(self.bn(self.conv(x)))


class Bottleneck(nn.Module):
    def __init__(self, channels: int, shortcut: bool = True):
        super().__init__()
        self.conv1 = ConvBNAct(channels, channels, 3)
        self.conv2 = ConvBNAct(channels, channels, 3)
        self.shortcut = shortcut

    def forward(self, x: Tensor) -> Tensor:
        y = self.conv2(self.conv1(x))
        return x + y if self.shortcut else y


class CSPBlock(nn.Module):
    """Split-merge residual stage: half the stream passes bottlenecks, halves concat."""

    def __init__(self, c_in: int, c_out: int, depth: int = 1, shortcut: bool = True):
        super().__init__()
        self.mid = c_out // 2
        self.split = ConvBNAct(c_in, 2 * self.mid, 1)
        self.blocks = nn.ModuleList(Bottleneck(self.mid, shortcut) for _ in range(depth))
        self.merge = ConvBNAct((2 + depth) * self.mid, c_out, 1)

    def forward(self, x: Tensor) -> Tensor:
        a, b = self.split(x).split((self.mid, self.mid), dim=1)
        outs = [a, b]
        for block in self.blocks:
            outs.append(block(outs[-1]))
        return self.merge(torch.cat(outs, dim=1))


class MLP(nn.Module):
    def __init__(self, d_in: int, d_hidden: int, d_out: int, depth: int = 2):
        super().__init__()
        dims = [d_in] + [d_hidden] * (depth - 1) + [d_out]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = torch.relu(x)
        return x


class MultiHeadSelfAttention(nn.Module):
    """Plain softmax attention with separate q/k/v sources.

    Kept in-repo (rather than nn.MultiheadAttention) so tests can hand-set
    projections and read the attention weights directly.
    """

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        if dim % num_heads != 0:
            raise ValueError(f"dim {dim} not divisible by num_heads {num_heads}")
        self.dim = dim
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def forward(
        self, q: Tensor, k: Tensor, v: Tensor, return_weights: bool = False
    ) -> Tensor | tuple[Tensor, Tensor]:
        b, nq, _ = q.shape
        nk = k.shape[1]
        h, hd = self.num_heads, self.head_dim
        qh = self.q_proj(q).view(b, nq, h, hd).transpose(1, 2)
        kh = self.k_proj(k).view(b, nk, h, hd).transpose(1, 2)
        vh = self.v_proj(v).view(b, nk, h, hd).transpose(1, 2)
        scores = qh @ kh.transpose(-2, -1) / hd**0.5
        weights = scores.softmax(dim=-1)
        out = (weights @ vh).transpose(1, 2).reshape(b, nq, self.dim)
        out = self.out_proj(out)
        if return_weights:
            return out, weights
        return out


class FeedForward(nn.Module):
    def __init__(self, dim: int, ratio: int = 4, act: nn.Module | None = None):
        super().__init__()
        self.linear1 = nn.Linear(dim, dim * ratio)
        self.linear2 = nn.Linear(dim * ratio, dim)
        self.act = act if act is not None else nn.ReLU()

    def forward(self, x: Tensor) -> Tensor:
        return self.linear2(self.act(self.linear1(x)))
