"""Identity lifecycle: query propagation, temporal aggregation, track emission.

The track query set for the next frame is the union of surviving track
queries and detect queries promoted this frame. Promotion, survival and
removal are threshold decisions at inference; during training the manager
follows the ground-truth-driven variant (see ``propagate_supervised``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch
from torch import Tensor, nn

from .boxes import BoundingBox, LabeledBox
from .decoder import DecoderOutput
from .layers import FeedForward, MultiHeadSelfAttention
from .matching import MatchResult

KIND_DETECT = 0
KIND_TRACK = 1


@dataclass(frozen=True)
class Thresholds:
    """Score gates for promotion / survival / emission plus miss tolerance."""

    tau_new: float = 0.5
    tau_keep: float = 0.5
    tau_emit: float = 0.5
    miss_tolerance: float = 5


@dataclass
class QuerySet:
    """Ordered query entries: embeddings + reference boxes + lifecycle metadata.

    Track entries carry a unique positive identity and a miss counter;
    detect entries have identity -1. ``scores`` is NaN until a decode has
    scored the entry.
    """

    embeddings: Tensor  # [N, D]
    ref_boxes: Tensor  # [N, 4] cxcywh in [0, 1]
    kinds: np.ndarray  # [N] KIND_DETECT / KIND_TRACK
    identities: np.ndarray  # [N] int64, -1 when unset
    scores: np.ndarray  # [N] float64, NaN when unset
    miss_counts: np.ndarray  # [N] int64

    def __post_init__(self) -> None:
        n = len(self)
        for name in ("kinds", "identities", "scores", "miss_counts"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} length != {n}")
        track_ids = self.identities[self.kinds == KIND_TRACK]
        if len(track_ids) != len(set(track_ids.tolist())):
            raise RuntimeError("identity collision inside a query set")
        if (track_ids <= 0).any():
            raise ValueError("track identities must be positive")

    def __len__(self) -> int:
        return self.embeddings.shape[0]

    @property
    def num_track(self) -> int:
        return int((self.kinds == KIND_TRACK).sum())

    @property
    def num_detect(self) -> int:
        return int((self.kinds == KIND_DETECT).sum())

    def track_indices(self) -> np.ndarray:
        return np.flatnonzero(self.kinds == KIND_TRACK)

    def detect_indices(self) -> np.ndarray:
        return np.flatnonzero(self.kinds == KIND_DETECT)

    @classmethod
    def empty(cls, dim: int, device=None, dtype=torch.float32) -> "QuerySet":
        return cls(
            embeddings=torch.zeros(0, dim, device=device, dtype=dtype),
            ref_boxes=torch.zeros(0, 4, device=device, dtype=dtype),
            kinds=np.zeros(0, dtype=np.int64),
            identities=np.zeros(0, dtype=np.int64),
            scores=np.zeros(0, dtype=np.float64),
            miss_counts=np.zeros(0, dtype=np.int64),
        )

    @classmethod
    def from_detect(cls, embeddings: Tensor, ref_boxes: Tensor) -> "QuerySet":
        n = embeddings.shape[0]
        return cls(
            embeddings=embeddings,
            ref_boxes=ref_boxes,
            kinds=np.full(n, KIND_DETECT, dtype=np.int64),
            identities=np.full(n, -1, dtype=np.int64),
            scores=np.full(n, np.nan),
            miss_counts=np.zeros(n, dtype=np.int64),
        )

    def concat(self, other: "QuerySet") -> "QuerySet":
        return QuerySet(
            embeddings=torch.cat([self.embeddings, other.embeddings], dim=0),
            ref_boxes=torch.cat([self.ref_boxes, other.ref_boxes], dim=0),
            kinds=np.concatenate([self.kinds, other.kinds]),
            identities=np.concatenate([self.identities, other.identities]),
            scores=np.concatenate([self.scores, other.scores]),
            miss_counts=np.concatenate([self.miss_counts, other.miss_counts]),
        )


@dataclass
class TrackInstance:
    """Persistent identity with its per-frame emitted boxes."""

    identity: int
    history: dict[int, LabeledBox] = field(default_factory=dict)
    active: bool = True

    def add(self, frame: int, box: LabeledBox) -> None:
        if self.history and frame <= max(self.history):
            raise ValueError(f"track {self.identity}: frame {frame} not strictly increasing")
        self.history[frame] = box


class TemporalAggregator(nn.Module):
    """Feature aggregation for surviving track queries.

    Self-attention where the query/key stream is (current hidden + previous
    embedding) and the value stream is the current hidden state, followed by
    a normalized feed-forward, both residual. With zero-initialized output
    projections the module is an exact pass-through of the hidden states.
    """

    def __init__(self, dim: int, num_heads: int = 8, ffn_ratio: int = 4):
        super().__init__()
        self.attn = MultiHeadSelfAttention(dim, num_heads)
        self.norm = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_ratio)

    def forward(self, hidden: Tensor, prev_embeddings: Tensor) -> Tensor:
        if hidden.shape != prev_embeddings.shape:
            raise ValueError("hidden/previous embedding shape mismatch")
        if hidden.shape[0] == 0:
            return hidden
        s = (hidden + prev_embeddings)[None]
        out = hidden[None] + self.attn(s, s, hidden[None])
        out = out + self.ffn(self.norm(out))
        return out[0]


class QueryManager:
    """Stateful per-sequence owner of identities and the track query set."""

    def __init__(self, tan: TemporalAggregator | None = None,
                 thresholds: Thresholds | None = None):
        self.tan = tan
        self.thresholds = thresholds or Thresholds()
        self.next_identity = 1
        self.tracks: dict[int, TrackInstance] = {}
        self.live_id_map: dict[int, int] = {}  # track identity -> bound gt identity

    def reset(self) -> None:
        self.next_identity = 1
        self.tracks.clear()
        self.live_id_map.clear()

    def _allocate(self) -> int:
        ident = self.next_identity
        self.next_identity += 1
        return ident

    def _assemble(self, prev: QuerySet, out: DecoderOutput, keep: list[int],
                  miss: dict[int, int], promote: list[int],
                  scores: np.ndarray, detach_refs: bool) -> QuerySet:
        """Build the next track set from surviving + promoted entry indices."""
        hidden = out.hidden[0]
        boxes = out.boxes[-1, 0]
        if detach_refs:
            boxes = boxes.detach()
        order = keep + promote
        identities = []
        for i in keep:
            identities.append(int(prev.identities[i]))
        for i in promote:
            identities.append(self._allocate())
        if len(identities) != len(set(identities)):
            raise RuntimeError("identity collision during propagation")

        prev_emb = prev.embeddings[order]
        cur_hidden = hidden[order]
        new_emb = self.tan(cur_hidden, prev_emb) if self.tan is not None else cur_hidden
        return QuerySet(
            embeddings=new_emb,
            ref_boxes=boxes[order].clamp(0.0, 1.0),
            kinds=np.full(len(order), KIND_TRACK, dtype=np.int64),
            identities=np.asarray(identities, dtype=np.int64),
            scores=scores[order].astype(np.float64),
            miss_counts=np.asarray([miss.get(i, 0) for i in keep] + [0] * len(promote), dtype=np.int64),
        )

    def propagate(self, prev_queries: QuerySet, decoder_out: DecoderOutput,
                  thresholds: Thresholds | None = None, detach_refs: bool = True) -> QuerySet:
        """Inference-time union + filtering: returns the next frame's track set.

        Detect entries above tau_new are promoted with fresh identities;
        track entries above tau_keep survive with the miss counter reset;
        the rest accumulate misses and are removed once the counter exceeds
        the tolerance. Survivor embeddings are TAN-aggregated; reference
        boxes are the decoder's final refined boxes.
        """
        th = thresholds or self.thresholds
        if decoder_out.hidden.shape[0] != 1 or decoder_out.hidden.shape[1] != len(prev_queries):
            raise ValueError("decoder output not aligned with the query set")
        scores = decoder_out.scores()[0].detach().cpu().numpy().astype(np.float64)

        keep: list[int] = []
        miss: dict[int, int] = {}
        promote: list[int] = []
        for i in range(len(prev_queries)):
            if prev_queries.kinds[i] == KIND_TRACK:
                if scores[i] > th.tau_keep:
                    keep.append(i)
                    miss[i] = 0
                else:
                    count = int(prev_queries.miss_counts[i]) + 1
                    if count <= th.miss_tolerance:
                        keep.append(i)
                        miss[i] = count
                    else:
                        ident = int(prev_queries.identities[i])
                        if ident in self.tracks:
                            self.tracks[ident].active = False
                        self.live_id_map.pop(ident, None)
            elif scores[i] > th.tau_new:
                promote.append(i)
        return self._assemble(prev_queries, decoder_out, keep, miss, promote, scores, detach_refs)

    def propagate_supervised(self, prev_queries: QuerySet, decoder_out: DecoderOutput,
                             match: MatchResult, gt_identities: list[int],
                             detach_refs: bool = True) -> QuerySet:
        """Training-time propagation driven by the label assignment.

        Detect queries matched to newborn ground truths are promoted and
        bound to that ground-truth identity; track queries whose bound
        ground truth is absent this frame are dropped.
        """
        if decoder_out.hidden.shape[1] != len(prev_queries):
            raise ValueError("decoder output not aligned with the query set")
        scores = decoder_out.scores()[0].detach().cpu().numpy().astype(np.float64)
        matched = match.pred_to_gt()

        keep: list[int] = []
        promote: list[int] = []
        bindings: list[int] = []
        for i in range(len(prev_queries)):
            if prev_queries.kinds[i] == KIND_TRACK:
                if i in matched:
                    keep.append(i)
                else:
                    self.live_id_map.pop(int(prev_queries.identities[i]), None)
            elif i in matched:
                promote.append(i)
                bindings.append(int(gt_identities[matched[i]]))

        next_set = self._assemble(prev_queries, decoder_out, keep, {i: 0 for i in keep},
                                  promote, scores, detach_refs)
        for ident, gt_ident in zip(next_set.identities[len(keep):].tolist(), bindings):
            self.live_id_map[int(ident)] = gt_ident
        return next_set

    def emit_tracks(self, frame_index: int, queries: QuerySet,
                    tau_emit: float | None = None) -> list[LabeledBox]:
        """Emit one labeled box per active track above the emission gate.

        Reads the post-propagation track set (which carries this frame's
        refined boxes and scores); output is sorted by identity.
        """
        tau = self.thresholds.tau_emit if tau_emit is None else tau_emit
        boxes = queries.ref_boxes.detach().cpu().numpy()
        emitted: list[LabeledBox] = []
        for i in range(len(queries)):
            if queries.kinds[i] != KIND_TRACK:
                continue
            if queries.miss_counts[i] != 0 or not queries.scores[i] > tau:
                continue
            ident = int(queries.identities[i])
            labeled = LabeledBox(
                box=BoundingBox(*(float(v) for v in boxes[i])),
                class_id=0,
                score=float(queries.scores[i]),
                identity=ident,
            )
            emitted.append(labeled)
            inst = self.tracks.setdefault(ident, TrackInstance(identity=ident))
            inst.active = True
            inst.add(frame_index, labeled)
        emitted.sort(key=lambda lb: lb.identity)
        return emitted

    def step(self, frame_index: int, prev_queries: QuerySet, decoder_out: DecoderOutput,
             detach_refs: bool = True) -> tuple[QuerySet, list[LabeledBox]]:
        """Propagate then emit; returns (next track set, boxes for this frame)."""
        next_set = self.propagate(prev_queries, decoder_out, detach_refs=detach_refs)
        return next_set, self.emit_tracks(frame_index, next_set)
