"""Single-shot detector at desk scale.

A strided conv backbone over a 3x128x128 canvas yields feature maps at
16x16, 8x8 and 4x4. Each map cell owns B default boxes (the listed
aspect ratios plus one extra ratio-1 box at the intermediate scale) and
a 3x3 conv head predicting 11 class logits (10 classes + background at
index 10) and 4 box offsets per default. Training minimizes the
multibox loss (cross-entropy with 3:1 hard negative mining plus
smooth-L1 localization, normalized by matched-box count); decoding
takes the per-box softmax argmax, drops background and low confidence,
decodes offsets against the defaults, and applies per-class NMS.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from . import checkpoint as ckpt
from .boxes import (
    Box,
    Detection,
    GtBox,
    boxes_to_tensor,
    decode_tensor,
    encode_offsets,
    decode_offsets,
    iou,
    iou_matrix,
    nms,
)
from .dataset_io import Scene
from .errors import DataError, NumericalError

NUM_CLASSES = 10
BACKGROUND = 10

DEFAULT_GRIDS = (16, 8, 4)
DEFAULT_RATIOS = (1.0, 2.0, 0.5)


@dataclass(frozen=True, eq=False)
class DefaultBoxSet:
    """Ordered default boxes, (map, row, column, ratio)-major.

    Per-cell order is the configured ratios followed by the extra
    ratio-1 box at scale sqrt(s_k * s_{k+1}).
    """

    boxes: tuple[Box, ...]
    layout: tuple[tuple[int, float, float, tuple[float, ...]], ...]  # (grid, scale, extra_scale, ratios)

    def __len__(self) -> int:
        return len(self.boxes)

    @property
    def tensor(self) -> torch.Tensor:
        cached = self.__dict__.get("_tensor")
        if cached is None:
            cached = boxes_to_tensor(self.boxes)
            self.__dict__["_tensor"] = cached
        return cached


def map_scales(m: int, s_min: float, s_max: float) -> list[float]:
    if not (0.0 < s_min < s_max <= 1.0):
        raise ValueError(f"need 0 < s_min < s_max <= 1, got ({s_min}, {s_max})")
    if m == 1:
        return [s_min]
    return [s_min + (s_max - s_min) * k / (m - 1) for k in range(m)]


def build_default_boxes(
    grids: list[tuple[int, tuple[float, ...]]],
    s_min: float = 0.2,
    s_max: float = 0.9,
) -> DefaultBoxSet:
    scales = map_scales(len(grids), s_min, s_max)
    boxes: list[Box] = []
    layout = []
    for k, (f_k, ratios) in enumerate(grids):
        if f_k < 1:
            raise ValueError(f"grid size must be >= 1, got {f_k}")
        s_k = scales[k]
        s_next = scales[k + 1] if k + 1 < len(grids) else 1.0
        extra = (s_k * s_next) ** 0.5
        per_cell = [(s_k * r ** 0.5, s_k / r ** 0.5) for r in ratios]
        if any(r == 1.0 for r in ratios):
            per_cell.append((extra, extra))
        for i in range(f_k):
            for j in range(f_k):
                cx = (j + 0.5) / f_k
                cy = (i + 0.5) / f_k
                for w, h in per_cell:
                    boxes.append(Box(cx, cy, w, h).clipped())
        layout.append((f_k, s_k, extra, tuple(ratios)))
    return DefaultBoxSet(boxes=tuple(boxes), layout=tuple(layout))


@dataclass(frozen=True)
class MatchResult:
    assignment: torch.Tensor  # (D,) long; truth index or -1 for background
    best_default: torch.Tensor  # (T,) long; forced default per truth

    @property
    def matched_mask(self) -> torch.Tensor:
        return self.assignment >= 0

    @property
    def num_matched(self) -> int:
        return int(self.matched_mask.sum())


def match_boxes(truths: list[GtBox], defaults: DefaultBoxSet, tau: float = 0.5) -> MatchResult:
    """Forced best match per truth, then IoU >= tau threshold matching.

    Forced matching is greedy bipartite: repeatedly take the unmatched
    (truth, default) pair of highest IoU, ties broken by lower truth
    index then lower default index.
    """
    n_defaults = len(defaults)
    if n_defaults == 0:
        raise DataError("empty default box set")
    if not (0.0 < tau < 1.0):
        raise ValueError(f"tau must be in (0, 1), got {tau}")
    assignment = torch.full((n_defaults,), -1, dtype=torch.long)
    n_truths = len(truths)
    best_default = torch.full((n_truths,), -1, dtype=torch.long)
    if n_truths == 0:
        return MatchResult(assignment, best_default)

    truth_tensor = boxes_to_tensor([t.box for t in truths])
    ious = iou_matrix(truth_tensor, defaults.tensor)  # (T, D)

    work = ious.clone()
    for _ in range(min(n_truths, n_defaults)):
        flat = int(work.argmax())  # row-major: lowest truth, then default, on ties
        t, d_idx = divmod(flat, n_defaults)
        if best_default[t] >= 0:
            break
        best_default[t] = d_idx
        assignment[d_idx] = t
        work[t, :] = -1.0
        work[:, d_idx] = -1.0

    best_truth_iou, best_truth = ious.max(dim=0)
    eligible = (assignment < 0) & (best_truth_iou >= tau)
    assignment[eligible] = best_truth[eligible]
    return MatchResult(assignment, best_default)


def build_targets(
    truths: list[GtBox], defaults: DefaultBoxSet, match: MatchResult
) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-default (class target (D,), encoded offsets (D, 4)).

    Unmatched defaults get the background class; their offset rows are
    zero and excluded from the localization loss.
    """
    n = len(defaults)
    class_targets = torch.full((n,), BACKGROUND, dtype=torch.long)
    encoded = torch.zeros((n, 4))
    mask = match.matched_mask
    if mask.any():
        idx = mask.nonzero(as_tuple=True)[0]
        truth_idx = match.assignment[idx]
        class_targets[idx] = torch.tensor([truths[int(t)].class_id for t in truth_idx])
        for d_idx, t_idx in zip(idx.tolist(), truth_idx.tolist()):
            encoded[d_idx] = torch.tensor(
                encode_offsets(truths[t_idx].box, defaults.boxes[d_idx])
            )
    return class_targets, encoded


def multibox_loss(
    class_logits: torch.Tensor,
    offset_preds: torch.Tensor,
    match: MatchResult,
    encoded_targets: torch.Tensor,
    class_targets: torch.Tensor,
    alpha: float = 1.0,
    neg_ratio: float = 3.0,
) -> torch.Tensor:
    """(L_conf + alpha * L_loc) / N with 3:1 hard negative mining.

    L_loc is the smooth-L1 sum over matched boxes; L_conf is the
    cross-entropy sum over matched boxes plus the floor(neg_ratio * N)
    background boxes with the largest background-class loss.
    """
    mask = match.matched_mask
    n_matched = int(mask.sum())
    if n_matched == 0:
        raise DataError("multibox_loss requires at least one matched default")
    loc = F.smooth_l1_loss(offset_preds[mask], encoded_targets[mask], reduction="sum")
    log_probs = F.log_softmax(class_logits, dim=1)
    pos_conf = -log_probs[mask, class_targets[mask]].sum()
    neg_mask = ~mask
    n_neg = min(int(neg_ratio * n_matched), int(neg_mask.sum()))
    if n_neg > 0:
        bg_losses = -log_probs[neg_mask, BACKGROUND]
        hard = torch.topk(bg_losses, n_neg).values
        neg_conf = hard.sum()
    else:
        neg_conf = torch.zeros(())
    return (pos_conf + neg_conf + alpha * loc) / n_matched


@dataclass(frozen=True)
class DetectorConfig:
    canvas_size: int = 128
    grids: tuple[int, ...] = DEFAULT_GRIDS
    ratios: tuple[float, ...] = DEFAULT_RATIOS
    s_min: float = 0.2
    s_max: float = 0.9
    tau: float = 0.5
    alpha: float = 1.0
    neg_ratio: float = 3.0
    batch_size: int = 16
    epochs: int = 20
    learning_rate: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")

    def default_boxes(self) -> DefaultBoxSet:
        return build_default_boxes(
            [(f, self.ratios) for f in self.grids], self.s_min, self.s_max
        )


class DetectorNet(nn.Module):
    """Strided conv backbone with per-map conv predictors."""

    CHANNELS = (24, 48, 96, 128, 128)

    def __init__(self, cfg: DetectorConfig | None = None):
        super().__init__()
        cfg = cfg if cfg is not None else DetectorConfig()
        self.cfg = cfg
        boxes_per_cell = len(cfg.ratios) + (1 if 1.0 in cfg.ratios else 0)
        self.boxes_per_cell = boxes_per_cell
        c = self.CHANNELS
        self.stem = nn.ModuleList()
        in_ch = 3
        for out_ch in c:
            self.stem.append(
                nn.Sequential(
                    nn.Conv2d(in_ch, out_ch, 4, 2, 1, bias=False),
                    nn.BatchNorm2d(out_ch),
                    nn.ReLU(inplace=True),
                )
            )
            in_ch = out_ch
        # Taps at the last len(grids) stages: 16x16, 8x8, 4x4 for a 128 canvas.
        self.tap_indices = tuple(range(len(c) - len(cfg.grids), len(c)))
        per_box = NUM_CLASSES + 1 + 4
        self.heads = nn.ModuleList(
            nn.Conv2d(c[i], boxes_per_cell * per_box, 3, padding=1) for i in self.tap_indices
        )

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(B, 3, S, S) -> class logits (B, D, 11), offsets (B, D, 4)."""
        taps = []
        h = x
        for i, stage in enumerate(self.stem):
            h = stage(h)
            if i in self.tap_indices:
                taps.append(h)
        per_box = NUM_CLASSES + 1 + 4
        rows = []
        for tap, head in zip(taps, self.heads):
            out = head(tap)  # (B, boxes*15, f, f)
            b, _, fh, fw = out.shape
            out = out.permute(0, 2, 3, 1).reshape(b, fh * fw * self.boxes_per_cell, per_box)
            rows.append(out)
        merged = torch.cat(rows, dim=1)
        return merged[..., : NUM_CLASSES + 1], merged[..., NUM_CLASSES + 1 :]


def make_detector(cfg: DetectorConfig | None = None, seed: int = 0) -> DetectorNet:
    net = DetectorNet(cfg)
    gen = torch.Generator().manual_seed(seed)
    for m in net.modules():
        if isinstance(m, nn.Conv2d):
            m.weight.data.normal_(0.0, 0.02, generator=gen)
            if m.bias is not None:
                m.bias.data.zero_()
        elif isinstance(m, nn.BatchNorm2d):
            m.weight.data.fill_(1.0)
            m.bias.data.zero_()
    return net


@dataclass
class DetectorLogRow:
    iteration: int
    epoch: int
    loss: float
    wall_ms: float


def write_detector_log(path: str | Path, rows: list[DetectorLogRow]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["iteration", "epoch", "loss", "wall_ms"])
        for r in rows:
            writer.writerow([r.iteration, r.epoch, r.loss, r.wall_ms])


def train_detector(
    scenes: list[Scene],
    cfg: DetectorConfig,
    net: DetectorNet | None = None,
    progress: bool = False,
) -> tuple[DetectorNet, list[DetectorLogRow]]:
    """Adam on the mean per-scene multibox loss over seeded shuffled batches.

    Batching is ceiling-style: the trailing partial batch still trains,
    so an epoch over n scenes runs ceil(n / batch_size) iterations.
    """
    if not scenes:
        raise DataError("train_detector requires at least one scene")
    for i, scene in enumerate(scenes):
        if not scene.truths:
            raise DataError(f"scene {i} has no ground-truth boxes")
    defaults = cfg.default_boxes()
    matches = []
    class_targets = []
    encoded = []
    for scene in scenes:
        m = match_boxes(scene.truths, defaults, cfg.tau)
        ct, enc = build_targets(scene.truths, defaults, m)
        matches.append(m)
        class_targets.append(ct)
        encoded.append(enc)
    canvases = torch.stack([s.canvas for s in scenes])

    if net is None:
        net = make_detector(cfg, cfg.seed)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)
    shuffle_gen = torch.Generator().manual_seed(cfg.seed + 1)

    log: list[DetectorLogRow] = []
    iteration = 0
    net.train()
    for epoch in range(1, cfg.epochs + 1):
        perm = torch.randperm(len(scenes), generator=shuffle_gen)
        for start in range(0, len(scenes), cfg.batch_size):
            t0 = time.perf_counter()
            iteration += 1
            idx = perm[start : start + cfg.batch_size]
            batch = canvases[idx]
            logits, offsets = net(batch)
            losses = [
                multibox_loss(
                    logits[row],
                    offsets[row],
                    matches[int(s)],
                    encoded[int(s)],
                    class_targets[int(s)],
                    cfg.alpha,
                    cfg.neg_ratio,
                )
                for row, s in enumerate(idx)
            ]
            loss = torch.stack(losses).mean()
            if not torch.isfinite(loss):
                raise NumericalError(f"non-finite detector loss at iteration {iteration}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            log.append(
                DetectorLogRow(
                    iteration=iteration,
                    epoch=epoch,
                    loss=float(loss.detach()),
                    wall_ms=(time.perf_counter() - t0) * 1000.0,
                )
            )
            if progress and iteration % 25 == 0:
                print(
                    f"[train-detector] iter {iteration} epoch {epoch} loss={log[-1].loss:.4f}",
                    flush=True,
                )
    net.eval()
    return net, log


def detect_batch(
    net: DetectorNet,
    canvases: torch.Tensor,
    conf_thr: float = 0.5,
    iou_thr: float = 0.45,
    top_k: int = 200,
    defaults: DefaultBoxSet | None = None,
) -> list[list[Detection]]:
    """Decode a batch of canvases into per-canvas NMS-filtered detections."""
    size = net.cfg.canvas_size
    if canvases.dim() != 4 or canvases.shape[1:] != (3, size, size):
        raise ValueError(f"canvas batch must be (n, 3, {size}, {size}), got {tuple(canvases.shape)}")
    if defaults is None:
        defaults = net.cfg.default_boxes()
    net.eval()
    with torch.no_grad():
        logits, offsets = net(canvases)
        probs = torch.softmax(logits, dim=2)
    results = []
    for row in range(canvases.shape[0]):
        conf, cls = probs[row].max(dim=1)
        keep = (cls != BACKGROUND) & (conf >= conf_thr)
        dets: list[Detection] = []
        if keep.any():
            idx = keep.nonzero(as_tuple=True)[0]
            decoded = decode_tensor(offsets[row][idx], defaults.tensor[idx])
            for r, d_idx in enumerate(idx.tolist()):
                cx, cy, w, h = (float(v) for v in decoded[r])
                dets.append(
                    Detection(
                        box=Box(cx, cy, w, h),
                        class_id=int(cls[d_idx]),
                        confidence=float(conf[d_idx]),
                    )
                )
        results.append(nms(dets, iou_thr=iou_thr, top_k=top_k))
    return results


def detect(
    net: DetectorNet,
    canvas: torch.Tensor,
    conf_thr: float = 0.5,
    iou_thr: float = 0.45,
    top_k: int = 200,
    defaults: DefaultBoxSet | None = None,
) -> list[Detection]:
    if canvas.dim() != 3:
        raise ValueError(f"canvas must be (3, S, S), got {tuple(canvas.shape)}")
    return detect_batch(net, canvas.unsqueeze(0), conf_thr, iou_thr, top_k, defaults)[0]


def save_detector(path: str | Path, net: DetectorNet, meta_extra: dict | None = None) -> None:
    meta = {"kind": "detector", "config": asdict(net.cfg)}
    if meta_extra:
        meta.update(meta_extra)
    ckpt.save_checkpoint(path, ckpt.module_state_tensors(net, "net."), meta)


def load_detector(path: str | Path) -> DetectorNet:
    archive = ckpt.load_checkpoint(path)
    raw = dict(archive.meta["config"])
    raw["grids"] = tuple(raw["grids"])
    raw["ratios"] = tuple(raw["ratios"])
    net = DetectorNet(DetectorConfig(**raw))
    ckpt.load_module_state(net, archive.tensors, "net.")
    net.eval()
    return net


def save_detections_jsonl(path: str | Path, per_scene: list[list[Detection]]) -> None:
    """One JSON object per detection: scene_id, class_id, box, confidence."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for scene_id, dets in enumerate(per_scene):
            for det in dets:
                f.write(
                    json.dumps(
                        {
                            "scene_id": scene_id,
                            "class_id": det.class_id,
                            "cx": det.box.cx,
                            "cy": det.box.cy,
                            "w": det.box.w,
                            "h": det.box.h,
                            "confidence": det.confidence,
                        },
                        sort_keys=True,
                    )
                    + "\n"
                )
