"""The detection cascade: baseline detector, GAN rescue stage, merge.

Pass 1 runs the detector at the low threshold t_low. Detections at or
above t_high pass through untouched. Detections in the band
[t_low, t_high) whose box area is at most small_max_area are rescue
candidates: the box is cropped from the canvas, enhanced by latent
projection against the generator, and rescored by the
discriminator-feature classifier. Candidates whose classifier
confidence reaches t_rescore are promoted as detections at the original
box with the classifier's class and confidence. The final set is the
NMS merge of pass-through and promoted detections.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .boxes import Box, Detection, nms
from .disc_features import LinearClassifier, classify_chips
from .enhancer import ProjectionConfig, enhance_chips, resize_chip
from .gan_core import DiscriminatorNet, GeneratorNet
from .ssd_detector import DetectorNet, detect


@dataclass(frozen=True)
class CascadeConfig:
    t_high: float = 0.5
    t_low: float = 0.15
    small_max_area: float = 0.05
    t_rescore: float = 0.6
    projection: ProjectionConfig = field(default_factory=ProjectionConfig)
    nms_iou: float = 0.45
    nms_top_k: int = 200

    def __post_init__(self):
        if not (0.0 < self.t_low < self.t_high <= 1.0):
            raise ValueError(f"need 0 < t_low < t_high <= 1, got ({self.t_low}, {self.t_high})")
        if not (0.0 < self.small_max_area <= 1.0):
            raise ValueError(f"small_max_area must be in (0, 1], got {self.small_max_area}")
        if not (0.0 < self.t_rescore <= 1.0):
            raise ValueError(f"t_rescore must be in (0, 1], got {self.t_rescore}")


@dataclass(frozen=True)
class CascadeCandidate:
    detection: Detection
    chip: torch.Tensor  # crop resized to (3, 32, 32), pre-enhancement
    enhanced: torch.Tensor  # (3, 32, 32)
    classifier_class: int
    classifier_confidence: float
    promoted: bool


@dataclass(frozen=True)
class CascadeTrace:
    pass1: tuple[Detection, ...]
    passthrough: tuple[Detection, ...]
    candidates: tuple[CascadeCandidate, ...]
    final: tuple[Detection, ...]


def crop_box(canvas: torch.Tensor, box: Box) -> torch.Tensor:
    """Crop the box's pixel region; at least one pixel in each axis."""
    size = canvas.shape[-1]
    x_min, y_min, x_max, y_max = box.corners()
    x0 = min(max(int(math.floor(x_min * size)), 0), size - 1)
    y0 = min(max(int(math.floor(y_min * size)), 0), size - 1)
    x1 = min(max(int(math.ceil(x_max * size)), x0 + 1), size)
    y1 = min(max(int(math.ceil(y_max * size)), y0 + 1), size)
    return canvas[:, y0:y1, x0:x1]


def run_baseline(net: DetectorNet, canvas: torch.Tensor, conf_thr: float) -> list[Detection]:
    """Exactly detect(); exists so both comparison arms share one path."""
    return detect(net, canvas, conf_thr=conf_thr)


def first_pass(net: DetectorNet, canvas: torch.Tensor, cfg: CascadeConfig) -> list[Detection]:
    """Detector sweep at the cascade's working point (t_low floor, cascade NMS)."""
    return detect(net, canvas, conf_thr=cfg.t_low, iou_thr=cfg.nms_iou, top_k=cfg.nms_top_k)


def split_detections(pass1: list[Detection], cfg: CascadeConfig) -> tuple[list[Detection], list[Detection]]:
    """Partition first-pass detections into (passthrough, rescue band).

    Passthrough keeps everything at or above t_high; the band keeps
    detections below t_high whose box area is at most small_max_area.
    Low-confidence large boxes fall in neither bucket.
    """
    passthrough = [det for det in pass1 if det.confidence >= cfg.t_high]
    band = [
        det
        for det in pass1
        if det.confidence < cfg.t_high and det.box.w * det.box.h <= cfg.small_max_area
    ]
    return passthrough, band


def run_cascade(
    g: GeneratorNet,
    d: DiscriminatorNet,
    clf: LinearClassifier,
    net: DetectorNet,
    canvas: torch.Tensor,
    cfg: CascadeConfig,
) -> CascadeTrace:
    pass1 = first_pass(net, canvas, cfg)
    passthrough, band = split_detections(pass1, cfg)

    candidates: list[CascadeCandidate] = []
    promoted: list[Detection] = []
    if band:
        chips = [resize_chip(crop_box(canvas, det.box)) for det in band]
        enhanced = enhance_chips(g, chips, cfg.projection, d)
        classes, confidences = classify_chips(d, clf, torch.stack(enhanced))
        for det, chip, enh, cls, conf in zip(band, chips, enhanced, classes, confidences):
            cls_i, conf_f = int(cls), float(conf)
            promote = conf_f >= cfg.t_rescore
            candidates.append(
                CascadeCandidate(
                    detection=det,
                    chip=chip,
                    enhanced=enh,
                    classifier_class=cls_i,
                    classifier_confidence=conf_f,
                    promoted=promote,
                )
            )
            if promote:
                promoted.append(Detection(box=det.box, class_id=cls_i, confidence=conf_f))

    final = nms(passthrough + promoted, iou_thr=cfg.nms_iou, top_k=cfg.nms_top_k)
    return CascadeTrace(
        pass1=tuple(pass1),
        passthrough=tuple(passthrough),
        candidates=tuple(candidates),
        final=tuple(final),
    )


def _det_dict(det: Detection) -> dict:
    return {
        "class_id": det.class_id,
        "confidence": det.confidence,
        "cx": det.box.cx,
        "cy": det.box.cy,
        "w": det.box.w,
        "h": det.box.h,
    }


def trace_to_dict(trace: CascadeTrace) -> dict:
    """JSON-ready trace: pass1 / candidates / final blocks."""
    return {
        "pass1": [_det_dict(d) for d in trace.pass1],
        "passthrough": [_det_dict(d) for d in trace.passthrough],
        "candidates": [
            {
                "detection": _det_dict(c.detection),
                "classifier_class": c.classifier_class,
                "classifier_confidence": c.classifier_confidence,
                "promoted": c.promoted,
            }
            for c in trace.candidates
        ],
        "final": [_det_dict(d) for d in trace.final],
    }


def save_trace(path: str | Path, trace: CascadeTrace) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(trace_to_dict(trace), f, indent=2, sort_keys=True)
        f.write("\n")
