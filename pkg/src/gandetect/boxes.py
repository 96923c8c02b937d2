"""Box geometry shared across the pipeline.

All boxes are axis-aligned and stored in normalized center form
(cx, cy, w, h) with canvas coordinates in [0, 1]. Offset encoding uses
the usual SSD variances (0.1, 0.1, 0.2, 0.2).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

CENTER_VARIANCE = 0.1
SIZE_VARIANCE = 0.2


@dataclass(frozen=True)
class Box:
    """Normalized (cx, cy, w, h) box."""

    cx: float
    cy: float
    w: float
    h: float

    def corners(self) -> tuple[float, float, float, float]:
        """(x0, y0, x1, y1) corner form."""
        return (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )

    def area(self) -> float:
        return self.w * self.h

    def clipped(self) -> "Box":
        """Clip corners to the unit canvas, keeping a strictly positive size."""
        x0, y0, x1, y1 = self.corners()
        x0 = min(max(x0, 0.0), 1.0)
        y0 = min(max(y0, 0.0), 1.0)
        x1 = min(max(x1, 0.0), 1.0)
        y1 = min(max(y1, 0.0), 1.0)
        if x1 - x0 < 1e-6:
            x0 = max(0.0, min(x0, 1.0 - 1e-6))
            x1 = x0 + 1e-6
        if y1 - y0 < 1e-6:
            y0 = max(0.0, min(y0, 1.0 - 1e-6))
            y1 = y0 + 1e-6
        return Box((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0)

    @staticmethod
    def from_corners(x0: float, y0: float, x1: float, y1: float) -> "Box":
        return Box((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0)


@dataclass(frozen=True)
class GtBox:
    """Ground-truth box with its object class."""

    box: Box
    class_id: int


@dataclass(frozen=True)
class Detection:
    """Detector or cascade output: box, class, softmax confidence."""

    box: Box
    class_id: int
    confidence: float


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes, computed in corner form."""
    ax0, ay0, ax1, ay1 = a.corners()
    bx0, by0, bx1, by1 = b.corners()
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = a.area() + b.area() - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def encode_offsets(gt: Box, default: Box) -> tuple[float, float, float, float]:
    """Encode a ground-truth box as variance-scaled offsets from a default box."""
    if gt.w <= 0 or gt.h <= 0 or default.w <= 0 or default.h <= 0:
        raise ValueError("boxes must have positive width and height")
    return (
        (gt.cx - default.cx) / default.w / CENTER_VARIANCE,
        (gt.cy - default.cy) / default.h / CENTER_VARIANCE,
        math.log(gt.w / default.w) / SIZE_VARIANCE,
        math.log(gt.h / default.h) / SIZE_VARIANCE,
    )


def decode_offsets(pred: tuple[float, float, float, float], default: Box) -> Box:
    """Exact inverse of :func:`encode_offsets`, clipped to the unit canvas."""
    if default.w <= 0 or default.h <= 0:
        raise ValueError("default box must have positive width and height")
    cx = pred[0] * CENTER_VARIANCE * default.w + default.cx
    cy = pred[1] * CENTER_VARIANCE * default.h + default.cy
    w = default.w * math.exp(pred[2] * SIZE_VARIANCE)
    h = default.h * math.exp(pred[3] * SIZE_VARIANCE)
    return Box(cx, cy, w, h).clipped()


def boxes_to_tensor(boxes: list[Box]) -> torch.Tensor:
    """Stack boxes into an (N, 4) float32 tensor in center form."""
    if not boxes:
        return torch.zeros((0, 4), dtype=torch.float32)
    return torch.tensor([[b.cx, b.cy, b.w, b.h] for b in boxes], dtype=torch.float32)


def iou_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pairwise IoU between (N, 4) and (M, 4) center-form box tensors."""
    a0 = a[:, :2] - a[:, 2:] / 2
    a1 = a[:, :2] + a[:, 2:] / 2
    b0 = b[:, :2] - b[:, 2:] / 2
    b1 = b[:, :2] + b[:, 2:] / 2
    lo = torch.maximum(a0[:, None, :], b0[None, :, :])
    hi = torch.minimum(a1[:, None, :], b1[None, :, :])
    wh = (hi - lo).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] * a[:, 3])[:, None]
    area_b = (b[:, 2] * b[:, 3])[None, :]
    union = area_a + area_b - inter
    return torch.where(union > 0, inter / union, torch.zeros_like(inter))


def encode_tensor(gt: torch.Tensor, defaults: torch.Tensor) -> torch.Tensor:
    """Vectorized :func:`encode_offsets` for matched (N, 4) box pairs."""
    off_xy = (gt[:, :2] - defaults[:, :2]) / defaults[:, 2:] / CENTER_VARIANCE
    off_wh = torch.log(gt[:, 2:] / defaults[:, 2:]) / SIZE_VARIANCE
    return torch.cat([off_xy, off_wh], dim=1)


def decode_tensor(pred: torch.Tensor, defaults: torch.Tensor) -> torch.Tensor:
    """Vectorized :func:`decode_offsets`; corners clipped to [0, 1]."""
    cxy = pred[:, :2] * CENTER_VARIANCE * defaults[:, 2:] + defaults[:, :2]
    wh = defaults[:, 2:] * torch.exp(pred[:, 2:] * SIZE_VARIANCE)
    lo = (cxy - wh / 2).clamp(0.0, 1.0)
    hi = (cxy + wh / 2).clamp(0.0, 1.0)
    # Boxes collapsed by clipping become a minimal sliver inside the canvas.
    lo = torch.clamp(lo, max=1.0 - 1e-6)
    hi = torch.maximum(hi, lo + 1e-6)
    return torch.cat([(lo + hi) / 2, hi - lo], dim=1)


def nms(dets: list[Detection], iou_thr: float = 0.45, top_k: int = 200) -> list[Detection]:
    """Greedy per-class non-maximum suppression.

    Within each class, detections are visited in descending confidence
    (ties broken by lower input index) and any unvisited detection with
    IoU strictly above ``iou_thr`` to a kept one is suppressed. Survivors
    from all classes are merged, sorted by descending confidence (same
    tie-break), and truncated to ``top_k``.
    """
    by_class: dict[int, list[int]] = {}
    for idx, det in enumerate(dets):
        by_class.setdefault(det.class_id, []).append(idx)

    kept: list[int] = []
    for cls_indices in by_class.values():
        order = sorted(cls_indices, key=lambda i: (-dets[i].confidence, i))
        suppressed = set()
        for pos, i in enumerate(order):
            if i in suppressed:
                continue
            kept.append(i)
            for j in order[pos + 1:]:
                if j in suppressed:
                    continue
                if iou(dets[i].box, dets[j].box) > iou_thr:
                    suppressed.add(j)

    kept.sort(key=lambda i: (-dets[i].confidence, i))
    return [dets[i] for i in kept[:top_k]]
