"""Box geometry shared by the whole tracker.

Model-facing boxes are normalized center format (cx, cy, w, h), all four
values fractions of image width/height. File formats use pixel ltwh; the
``convert`` helper moves between the three supported layouts.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

log = logging.getLogger(__name__)

# construction tolerates this much sigmoid/rounding drift outside [0, 1]
DRIFT = 1e-6

CXCYWH_NORM = "cxcywh-normalized"
XYXY_PIXELS = "xyxy-pixels"
LTWH_PIXELS = "ltwh-pixels"
_FORMATS = (CXCYWH_NORM, XYXY_PIXELS, LTWH_PIXELS)


def _clamp01(v: float, name: str) -> float:
    if v < -DRIFT or v > 1.0 + DRIFT:
        raise ValueError(f"box {name}={v!r} outside [0,1] beyond drift tolerance")
    return min(max(v, 0.0), 1.0)


@dataclass(frozen=True)
class BoundingBox:
    """Normalized center-format box; immutable after construction."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "cx", _clamp01(float(self.cx), "cx"))
        object.__setattr__(self, "cy", _clamp01(float(self.cy), "cy"))
        for name in ("w", "h"):
            v = float(getattr(self, name))
            if v <= 0.0:
                raise ValueError(f"box {name}={v!r} must be positive")
            object.__setattr__(self, name, _clamp01(v, name))
            if getattr(self, name) == 0.0:
                raise ValueError(f"box {name} collapsed to zero")

    def as_xyxy(self) -> tuple[float, float, float, float]:
        return (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)

    @classmethod
    def from_xyxy(cls, x1: float, y1: float, x2: float, y2: float) -> "BoundingBox":
        return cls((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)

    def area(self) -> float:
        return self.w * self.h


@dataclass(frozen=True)
class LabeledBox:
    """Box plus class/score/identity metadata.

    ``identity`` is present on every ground-truth and emitted track box and
    absent only on raw detections.
    """

    box: BoundingBox
    class_id: int = 0
    score: float = 1.0
    identity: int | None = None

    def __post_init__(self) -> None:
        if self.class_id < 0:
            raise ValueError("class_id must be non-negative")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score={self.score!r} outside [0,1]")
        if self.identity is not None and self.identity < 0:
            raise ValueError("identity must be non-negative")


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union of two normalized boxes; 0 when disjoint."""
    ax1, ay1, ax2, ay2 = a.as_xyxy()
    bx1, by1, bx2, by2 = b.as_xyxy()
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    # areas from the same corner arithmetic, so identical boxes give exactly 1
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union


def giou(a: BoundingBox, b: BoundingBox) -> float:
    """Generalized IoU: IoU minus (enclosing - union) / enclosing, in [-1, 1]."""
    ax1, ay1, ax2, ay2 = a.as_xyxy()
    bx1, by1, bx2, by2 = b.as_xyxy()
    iw = max(min(ax2, bx2) - max(ax1, bx1), 0.0)
    ih = max(min(ay2, by2) - max(ay1, by1), 0.0)
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    enc = (max(ax2, bx2) - min(ax1, bx1)) * (max(ay2, by2) - min(ay1, by1))
    return inter / union - (enc - union) / enc


def convert(
    coords: tuple[float, float, float, float],
    src: str,
    dst: str,
    image_size: tuple[int, int] | None = None,
) -> tuple[float, float, float, float]:
    """Exact affine conversion between box layouts.

    ``image_size`` is (width, height) in pixels and is required whenever a
    pixel layout is involved.
    """
    for tag in (src, dst):
        if tag not in _FORMATS:
            raise ValueError(f"unknown box format {tag!r}; expected one of {_FORMATS}")
    if src == dst:
        return tuple(float(v) for v in coords)
    needs_size = XYXY_PIXELS in (src, dst) or LTWH_PIXELS in (src, dst)
    if needs_size:
        if image_size is None:
            raise ValueError("image_size required for pixel formats")
        iw, ih = float(image_size[0]), float(image_size[1])

    # route everything through normalized cxcywh
    a, b, c, d = (float(v) for v in coords)
    if src == XYXY_PIXELS:
        cx, cy, w, h = (a + c) / 2.0 / iw, (b + d) / 2.0 / ih, (c - a) / iw, (d - b) / ih
    elif src == LTWH_PIXELS:
        cx, cy, w, h = (a + c / 2.0) / iw, (b + d / 2.0) / ih, c / iw, d / ih
    else:
        cx, cy, w, h = a, b, c, d

    if dst == XYXY_PIXELS:
        return ((cx - w / 2.0) * iw, (cy - h / 2.0) * ih, (cx + w / 2.0) * iw, (cy + h / 2.0) * ih)
    if dst == LTWH_PIXELS:
        return ((cx - w / 2.0) * iw, (cy - h / 2.0) * ih, w * iw, h * ih)
    return (cx, cy, w, h)


def inflate_degenerate(w: float, h: float, minimum: float = 1e-6) -> tuple[float, float]:
    """Replace zero width/height (bad annotation files) with a tiny positive size."""
    if w <= 0.0 or h <= 0.0:
        log.warning("zero-size box inflated to %g (w=%g h=%g)", minimum, w, h)
    return max(w, minimum), max(h, minimum)


# --- batched forms used by losses / metrics -------------------------------


def cxcywh_to_xyxy(boxes: torch.Tensor) -> torch.Tensor:
    cx, cy, w, h = boxes.unbind(-1)
    return torch.stack((cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2), dim=-1)


def xyxy_to_cxcywh(boxes: torch.Tensor) -> torch.Tensor:
    x1, y1, x2, y2 = boxes.unbind(-1)
    return torch.stack(((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1), dim=-1)


def giou_tensor(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Elementwise GIoU for aligned [..., 4] cxcywh tensors (differentiable)."""
    ax = cxcywh_to_xyxy(a)
    bx = cxcywh_to_xyxy(b)
    iw = (torch.minimum(ax[..., 2], bx[..., 2]) - torch.maximum(ax[..., 0], bx[..., 0])).clamp(min=0)
    ih = (torch.minimum(ax[..., 3], bx[..., 3]) - torch.maximum(ax[..., 1], bx[..., 1])).clamp(min=0)
    inter = iw * ih
    area_a = a[..., 2] * a[..., 3]
    area_b = b[..., 2] * b[..., 3]
    union = area_a + area_b - inter
    ew = torch.maximum(ax[..., 2], bx[..., 2]) - torch.minimum(ax[..., 0], bx[..., 0])
    eh = torch.maximum(ax[..., 3], bx[..., 3]) - torch.minimum(ax[..., 1], bx[..., 1])
    enc = ew * eh
    return inter / union - (enc - union) / enc


def giou_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pairwise GIoU between [N, 4] and [M, 4] cxcywh tensors -> [N, M]."""
    return giou_tensor(a[:, None, :], b[None, :, :])


def iou_matrix_ltwh(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between pixel ltwh arrays [N, 4] and [M, 4] -> [N, M]."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ax1, ay1 = a[:, 0], a[:, 1]
    ax2, ay2 = a[:, 0] + a[:, 2], a[:, 1] + a[:, 3]
    bx1, by1 = b[:, 0], b[:, 1]
    bx2, by2 = b[:, 0] + b[:, 2], b[:, 1] + b[:, 3]
    iw = np.minimum(ax2[:, None], bx2[None, :]) - np.maximum(ax1[:, None], bx1[None, :])
    ih = np.minimum(ay2[:, None], by2[None, :]) - np.maximum(ay1[:, None], by1[None, :])
    inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def inverse_sigmoid(x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    x = x.clamp(min=0.0, max=1.0)
    return torch.log(x.clamp(min=eps) / (1.0 - x).clamp(min=eps))
