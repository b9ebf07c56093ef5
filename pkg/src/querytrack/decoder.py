"""Multi-scale deformable-attention decoder with iterative box refinement.

Queries carry an embedding and a normalized reference box. Each layer runs
self-attention over the queries, deformable cross-attention into the encoder
memory (a small set of learned fractional sampling points per level/head,
bilinearly interpolated), and an FFN; the box head predicts a delta in
inverse-sigmoid space on top of the incoming reference.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .boxes import inverse_sigmoid
from .encoder import EncoderMemory
from .layers import MLP, FeedForward, MultiHeadSelfAttention


@dataclass(frozen=True)
class DecoderConfig:
    dim: int = 256
    num_layers: int = 6
    num_heads: int = 8
    num_points: int = 4  # sampling points per head per level
    num_levels: int = 3
    ffn_ratio: int = 4
    num_queries: int = 60  # detect queries


@dataclass
class DecoderOutput:
    """Per-layer logits/boxes (deep supervision) plus final hidden states."""

    logits: Tensor  # [L, B, N, 1]
    boxes: Tensor  # [L, B, N, 4], sigmoid domain
    hidden: Tensor  # [B, N, D]

    @property
    def num_layers(self) -> int:
        return self.logits.shape[0]

    def scores(self) -> Tensor:
        """Foreground score per query from the final layer, [B, N]."""
        return self.logits[-1, ..., 0].sigmoid()


def ms_deform_sample(
    value: Tensor,
    spatial_shapes: tuple[tuple[int, int], ...],
    locations: Tensor,
    weights: Tensor,
) -> Tensor:
    """Weighted bilinear sampling core of deformable attention.

    value: [B, S, H, Dh] flattened multi-level features per head.
    locations: [B, N, H, L, K, 2] in normalized [0, 1] map coordinates, where
        the center of cell (row i, col j) sits at ((j + 0.5)/W, (i + 0.5)/H).
    weights: [B, N, H, L, K], expected to sum to 1 over (L, K) per head.
    Returns [B, N, H * Dh]. Samples beyond the border fade to zero.
    """
    b, _, h, dh = value.shape
    n = locations.shape[1]
    sizes = [hw[0] * hw[1] for hw in spatial_shapes]
    sampled = []
    for lvl, ((mh, mw), chunk) in enumerate(zip(spatial_shapes, value.split(sizes, dim=1))):
        grid = 2.0 * locations[:, :, :, lvl] - 1.0  # [B, N, H, K, 2]
        grid = grid.permute(0, 2, 1, 3, 4).reshape(b * h, n, -1, 2)
        maps = chunk.permute(0, 2, 3, 1).reshape(b * h, dh, mh, mw)
        out = F.grid_sample(maps, grid, mode="bilinear", padding_mode="zeros", align_corners=False)
        sampled.append(out.view(b, h, dh, n, -1))
    stacked = torch.cat(sampled, dim=-1)  # [B, H, Dh, N, L*K]
    w = weights.permute(0, 2, 1, 3, 4).reshape(b, h, 1, n, -1)
    return (stacked * w).sum(-1).permute(0, 3, 1, 2).reshape(b, n, h * dh)


class MSDeformAttention(nn.Module):
    """Deformable attention: offsets and weights are linear maps of the query."""

    def __init__(self, dim: int, num_heads: int = 8, num_levels: int = 3, num_points: int = 4):
        super().__init__()
        if dim % num_heads != 0:
            raise ValueError(f"dim {dim} not divisible by num_heads {num_heads}")
        self.dim = dim
        self.num_heads = num_heads
        self.num_levels = num_levels
        self.num_points = num_points
        self.sampling_offsets = nn.Linear(dim, num_heads * num_levels * num_points * 2)
        self.attention_weights = nn.Linear(dim, num_heads * num_levels * num_points)
        self.value_proj = nn.Linear(dim, dim)
        self.output_proj = nn.Linear(dim, dim)
        self._reset_parameters()

    def _reset_parameters(self) -> None:
        nn.init.zeros_(self.sampling_offsets.weight)
        # spread initial sampling directions around the unit circle, one per head
        angles = torch.arange(self.num_heads, dtype=torch.float32) * (2.0 * math.pi / self.num_heads)
        grid = torch.stack([angles.cos(), angles.sin()], dim=-1)
        grid = grid / grid.abs().max(-1, keepdim=True).values
        grid = grid.view(self.num_heads, 1, 1, 2).repeat(1, self.num_levels, self.num_points, 1)
        for k in range(self.num_points):
            grid[:, :, k, :] *= k + 1
        with torch.no_grad():
            self.sampling_offsets.bias.copy_(grid.reshape(-1))
        nn.init.zeros_(self.attention_weights.weight)
        nn.init.zeros_(self.attention_weights.bias)
        nn.init.xavier_uniform_(self.value_proj.weight)
        nn.init.zeros_(self.value_proj.bias)
        nn.init.xavier_uniform_(self.output_proj.weight)
        nn.init.zeros_(self.output_proj.bias)

    def sampling_parameters(self, query: Tensor, ref_boxes: Tensor) -> tuple[Tensor, Tensor]:
        """Locations [B, N, H, L, K, 2] and softmax weights [B, N, H, L, K]."""
        b, n, _ = query.shape
        h, l, k = self.num_heads, self.num_levels, self.num_points
        offsets = self.sampling_offsets(query).view(b, n, h, l, k, 2)
        weights = self.attention_weights(query).view(b, n, h, l * k).softmax(-1).view(b, n, h, l, k)
        centers = ref_boxes[:, :, None, None, None, :2]
        scale = ref_boxes[:, :, None, None, None, 2:] * 0.5
        return centers + offsets / k * scale, weights

    def forward(self, query: Tensor, ref_boxes: Tensor, memory: EncoderMemory) -> Tensor:
        """query [B, N, D], ref_boxes [B, N, 4] cxcywh in [0, 1] -> [B, N, D]."""
        if ref_boxes.numel() and (ref_boxes.min() < 0.0 or ref_boxes.max() > 1.0):
            raise ValueError("reference boxes must lie inside the unit square")
        b = query.shape[0]
        h = self.num_heads
        if len(memory.spatial_shapes) != self.num_levels:
            raise ValueError(
                f"memory has {len(memory.spatial_shapes)} levels, expected {self.num_levels}"
            )
        value = self.value_proj(memory.memory).view(b, -1, h, self.dim // h)
        locations, weights = self.sampling_parameters(query, ref_boxes)
        out = ms_deform_sample(value, memory.spatial_shapes, locations, weights)
        return self.output_proj(out)


class DecoderLayer(nn.Module):
    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        self.self_attn = MultiHeadSelfAttention(cfg.dim, cfg.num_heads)
        self.norm1 = nn.LayerNorm(cfg.dim)
        self.cross_attn = MSDeformAttention(cfg.dim, cfg.num_heads, cfg.num_levels, cfg.num_points)
        self.norm2 = nn.LayerNorm(cfg.dim)
        self.ffn = FeedForward(cfg.dim, cfg.ffn_ratio)
        self.norm3 = nn.LayerNorm(cfg.dim)

    def forward(self, h: Tensor, pos: Tensor, ref_boxes: Tensor, memory: EncoderMemory) -> Tensor:
        q = h + pos
        h = self.norm1(h + self.self_attn(q, q, h))
        h = self.norm2(h + self.cross_attn(h + pos, ref_boxes, memory))
        return self.norm3(h + self.ffn(h))


class DeformableDecoder(nn.Module):
    """Stack of decoder layers with per-layer heads and box refinement."""

    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        self.cfg = cfg
        self.layers = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.num_layers))
        self.class_heads = nn.ModuleList(nn.Linear(cfg.dim, 1) for _ in range(cfg.num_layers))
        self.box_heads = nn.ModuleList(
            MLP(cfg.dim, cfg.dim, 4, depth=3) for _ in range(cfg.num_layers)
        )
        self.ref_pos = MLP(4, cfg.dim, cfg.dim, depth=2)
        prior = -math.log((1.0 - 0.01) / 0.01)  # focal-style prior keeps early scores low
        for head in self.class_heads:
            nn.init.zeros_(head.weight)
            nn.init.constant_(head.bias, prior)
        for head in self.box_heads:
            nn.init.zeros_(head.layers[-1].weight)
            nn.init.zeros_(head.layers[-1].bias)

    def decode(self, embeddings: Tensor, ref_boxes: Tensor, memory: EncoderMemory) -> DecoderOutput:
        """embeddings [B, N, D], ref_boxes [B, N, 4] -> per-layer outputs."""
        b, n, _ = embeddings.shape
        if n == 0:
            l = self.cfg.num_layers
            empty = embeddings.new_zeros
            return DecoderOutput(
                logits=empty((l, b, 0, 1)), boxes=empty((l, b, 0, 4)), hidden=empty((b, 0, self.cfg.dim))
            )
        h = embeddings
        ref = ref_boxes
        all_logits, all_boxes = [], []
        for layer, cls_head, box_head in zip(self.layers, self.class_heads, self.box_heads):
            pos = self.ref_pos(ref)
            h = layer(h, pos, ref, memory)
            delta = box_head(h)
            ref = (inverse_sigmoid(ref) + delta).sigmoid()
            all_logits.append(cls_head(h))
            all_boxes.append(ref)
        return DecoderOutput(
            logits=torch.stack(all_logits), boxes=torch.stack(all_boxes), hidden=h
        )

    forward = decode


class DetectQueryBank(nn.Module):
    """Fixed-length learnable detect queries: embeddings + sigmoid-space boxes.

    The same parameters are handed out on every frame, so the fresh detect
    half of the query set is identical frame to frame before decoding.
    """

    def __init__(self, num_queries: int, dim: int):
        super().__init__()
        if num_queries <= 0:
            raise ValueError("num_queries must be positive")
        self.num_queries = num_queries
        self.embeddings = nn.Parameter(torch.empty(num_queries, dim))
        nn.init.normal_(self.embeddings, std=0.02)
        # centers on a jittered grid for coverage, moderate initial extent
        side = math.ceil(math.sqrt(num_queries))
        idx = torch.arange(num_queries, dtype=torch.float32)
        cx = ((idx % side) + 0.5) / side
        cy = (torch.div(idx, side, rounding_mode="floor") + 0.5) / side
        wh = torch.full((num_queries, 2), 0.15)
        boxes = torch.cat([cx[:, None], cy[:, None], wh], dim=1).clamp(0.02, 0.98)
        self.ref_logits = nn.Parameter(torch.log(boxes / (1.0 - boxes)))

    def detect_queries(self, batch: int = 1) -> tuple[Tensor, Tensor]:
        emb = self.embeddings[None].expand(batch, -1, -1)
        refs = self.ref_logits.sigmoid()[None].expand(batch, -1, -1)
        return emb, refs
