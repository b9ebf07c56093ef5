"""Bipartite matching costs, tracklet-aware assignment, and the loss stack.

Single foreground class throughout: classification is binary focal loss on
the foreground logit, background is absence of foreground. Box terms use L1
in normalized cxcywh plus a GIoU penalty, both over matched pairs only.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from .boxes import giou_matrix, giou_tensor
from .decoder import DecoderOutput
from .matching import MatchResult, hungarian
from .queries import KIND_TRACK, QuerySet

FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0
_COST_EPS = 1e-8


@dataclass(frozen=True)
class LossWeights:
    cls: float = 2.0
    l1: float = 5.0
    giou: float = 2.0


@dataclass
class LossBreakdown:
    """Raw (unnormalized) per-frame loss components and the frame's gt count."""

    cls: Tensor
    l1: Tensor
    giou: Tensor
    total: Tensor
    v: int

    def detached(self) -> dict[str, float]:
        return {
            "cls": float(self.cls.detach()),
            "l1": float(self.l1.detach()),
            "giou": float(self.giou.detach()),
            "total": float(self.total.detach()),
            "v": self.v,
        }


def focal_loss(logits: Tensor, targets: Tensor,
               alpha: float = FOCAL_ALPHA, gamma: float = FOCAL_GAMMA) -> Tensor:
    """Sum of binary focal losses; targets are 0/1 foreground indicators."""
    ce = F.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    p = logits.sigmoid()
    p_t = p * targets + (1.0 - p) * (1.0 - targets)
    a_t = alpha * targets + (1.0 - alpha) * (1.0 - targets)
    return (a_t * (1.0 - p_t) ** gamma * ce).sum()


def focal_cost(logits: Tensor, alpha: float = FOCAL_ALPHA, gamma: float = FOCAL_GAMMA) -> Tensor:
    """Classification matching cost per prediction (single foreground class)."""
    p = logits.sigmoid()
    pos = alpha * (1.0 - p) ** gamma * (-torch.log(p + _COST_EPS))
    neg = (1.0 - alpha) * p**gamma * (-torch.log(1.0 - p + _COST_EPS))
    return pos - neg


def detection_cost(pred_logits: Tensor, pred_boxes: Tensor, gt_boxes: Tensor,
                   weights: LossWeights | None = None) -> np.ndarray:
    """Matching cost matrix [num_pred, num_gt] for newborn assignment."""
    w = weights or LossWeights()
    with torch.no_grad():
        cls = focal_cost(pred_logits.reshape(-1))[:, None].expand(-1, gt_boxes.shape[0])
        l1 = torch.cdist(pred_boxes.double(), gt_boxes.double(), p=1)
        giou = giou_matrix(pred_boxes.double(), gt_boxes.double())
        cost = w.cls * cls.double() + w.l1 * l1 + w.giou * (1.0 - giou)
    return cost.cpu().numpy()


def tala_assign(queries: QuerySet, decoder_out: DecoderOutput, gt_boxes: Tensor,
                gt_identities: Sequence[int], live_id_map: dict[int, int],
                weights: LossWeights | None = None) -> MatchResult:
    """Tracklet-aware label assignment over the full query list.

    Track queries bind to the ground truth carrying their identity without
    any matching search; ground truths absent this frame leave their track
    query unmatched (background supervision). Remaining newborn ground
    truths are Hungarian-matched against the detect queries.
    """
    n = len(queries)
    if decoder_out.hidden.shape[1] != n:
        raise ValueError("decoder output not aligned with the query set")
    if len(gt_identities) != gt_boxes.shape[0]:
        raise ValueError("gt identities/boxes length mismatch")

    gt_index = {}
    for j, gid in enumerate(gt_identities):
        if gid in gt_index:
            raise ValueError(f"duplicate ground-truth identity {gid} in one frame")
        gt_index[int(gid)] = j

    pairs: list[tuple[int, int]] = []
    bound: set[int] = set()
    claimed: set[int] = set()
    for i in queries.track_indices():
        ident = int(queries.identities[i])
        gt_ident = live_id_map.get(ident)
        if gt_ident is None:
            continue
        if gt_ident in claimed:
            raise RuntimeError(f"two track queries claim ground-truth identity {gt_ident}")
        claimed.add(gt_ident)
        bound.add(gt_ident)
        if gt_ident in gt_index:
            pairs.append((int(i), gt_index[gt_ident]))

    newborn = [j for j, gid in enumerate(gt_identities) if int(gid) not in bound]
    detect = [int(i) for i in queries.detect_indices()]
    if newborn and detect:
        logits = decoder_out.logits[-1, 0, detect, 0]
        boxes = decoder_out.boxes[-1, 0, detect]
        cost = detection_cost(logits, boxes, gt_boxes[newborn], weights)
        sub = hungarian(cost)
        for pi, gj in sub.pairs:
            pairs.append((detect[pi], newborn[gj]))

    matched_p = {p for p, _ in pairs}
    matched_g = {g for _, g in pairs}
    return MatchResult(
        pairs=sorted(pairs),
        unmatched_pred=[i for i in range(n) if i not in matched_p],
        unmatched_gt=[j for j in range(gt_boxes.shape[0]) if j not in matched_g],
    )


def frame_loss(decoder_out: DecoderOutput, match: MatchResult, gt_boxes: Tensor,
               weights: LossWeights | None = None) -> LossBreakdown:
    """Single-frame loss over all deep-supervision layers with one match.

    Classification covers every query (matched -> foreground, unmatched ->
    background); L1/GIoU cover matched pairs only. Components are raw sums;
    normalization happens in the stage losses.
    """
    w = weights or LossWeights()
    n_layers = decoder_out.num_layers
    device = decoder_out.logits.device
    dtype = decoder_out.logits.dtype
    n = decoder_out.logits.shape[2]

    targets = torch.zeros(n, device=device, dtype=dtype)
    if match.pairs:
        pred_idx = torch.tensor([p for p, _ in match.pairs], device=device, dtype=torch.long)
        gt_idx = torch.tensor([g for _, g in match.pairs], device=device, dtype=torch.long)
        targets[pred_idx] = 1.0

    cls = decoder_out.logits.new_zeros(())
    l1 = decoder_out.logits.new_zeros(())
    giou = decoder_out.logits.new_zeros(())
    for layer in range(n_layers):
        logits = decoder_out.logits[layer, 0, :, 0]
        cls = cls + focal_loss(logits, targets)
        if match.pairs:
            pb = decoder_out.boxes[layer, 0, pred_idx]
            gb = gt_boxes[gt_idx].to(dtype)
            l1 = l1 + (pb - gb).abs().sum()
            giou = giou + (1.0 - giou_tensor(pb, gb)).sum()
    total = w.cls * cls + w.l1 * l1 + w.giou * giou
    return LossBreakdown(cls=cls, l1=l1, giou=giou, total=total, v=int(gt_boxes.shape[0]))


def stage1_loss(decoder_out: DecoderOutput, gt_boxes: Tensor,
                weights: LossWeights | None = None) -> tuple[Tensor, LossBreakdown]:
    """Detection-only loss: Hungarian match on the final layer, normalized by V.

    Only legal when no track queries exist (single-frame training).
    """
    w = weights or LossWeights()
    with torch.no_grad():
        logits = decoder_out.logits[-1, 0, :, 0]
        boxes = decoder_out.boxes[-1, 0]
        if gt_boxes.shape[0] > 0 and boxes.shape[0] > 0:
            match = hungarian(detection_cost(logits, boxes, gt_boxes, w))
        else:
            match = MatchResult(pairs=[], unmatched_pred=list(range(boxes.shape[0])),
                                unmatched_gt=list(range(gt_boxes.shape[0])))
    breakdown = frame_loss(decoder_out, match, gt_boxes, w)
    return breakdown.total / max(breakdown.v, 1), breakdown


def cal_loss(breakdowns: Sequence[LossBreakdown], clip_length: int) -> Tensor:
    """Collective average over a clip: sum of frame totals over total gt count.

    One value per clip; the caller takes a single optimizer step on it.
    """
    if len(breakdowns) != clip_length:
        raise ValueError(f"clip has {len(breakdowns)} frames, expected {clip_length}")
    total = breakdowns[0].total.new_zeros(())
    v = 0
    for b in breakdowns:
        total = total + b.total
        v += b.v
    return total / max(v, 1)
