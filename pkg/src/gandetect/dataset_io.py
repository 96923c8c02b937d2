"""CIFAR-10 binary parsing, distance degradation and scene composition.

Image chips are float32 torch tensors of shape (3, H, W) with values in
[-1, 1]; the canonical chip is 3x32x32. The CIFAR-10 binary format is one
3073-byte record per image: a label byte followed by 1024 red, 1024 green
and 1024 blue bytes, each plane row-major 32x32.

"Distance" is simulated by area-downsampling a chip, blurring and noising
it at the reduced size, and bilinearly upsampling back, so degraded and
clean chips share a shape and differ only in information content.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .boxes import Box, GtBox, iou
from .errors import DataError

RECORD_BYTES = 3073
CHIP_SHAPE = (3, 32, 32)
NUM_CLASSES = 10

BACKGROUND_AMPLITUDE = 0.2
MAX_PLACEMENT_IOU = 0.3


@dataclass(frozen=True)
class CifarRecord:
    """One raw CIFAR-10 record: class label plus 3072 pixel bytes."""

    label: int
    pixels: bytes

    def __post_init__(self):
        if not 0 <= self.label <= 9:
            raise DataError(f"label {self.label} outside 0..9")
        if len(self.pixels) != RECORD_BYTES - 1:
            raise DataError(f"expected {RECORD_BYTES - 1} pixel bytes, got {len(self.pixels)}")


@dataclass(frozen=True)
class DegradationSpec:
    """Distance simulation parameters.

    scale_factor in (0, 1] controls the information loss (the chip is
    resampled through a ceil(scale * size) grid); blur_sigma and
    noise_sigma act at the reduced size, in pixels and [-1, 1] amplitude
    units respectively.
    """

    scale_factor: float
    blur_sigma: float = 0.0
    noise_sigma: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.scale_factor <= 1.0:
            raise ValueError(f"scale_factor must be in (0, 1], got {self.scale_factor}")
        if self.blur_sigma < 0 or self.noise_sigma < 0:
            raise ValueError("blur_sigma and noise_sigma must be >= 0")


@dataclass
class Scene:
    """A composed canvas with ground truths and per-object provenance."""

    canvas: torch.Tensor
    truths: list[GtBox]
    provenance: list[dict] = field(default_factory=list)


def load_cifar10(path: str | Path) -> list[CifarRecord]:
    """Parse a CIFAR-10 binary file bit-exactly.

    The file length must be a multiple of 3073; records are returned in
    file order. ``serialize_records`` inverts this exactly.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"CIFAR file not found: {path}")
    data = path.read_bytes()
    if len(data) % RECORD_BYTES != 0:
        raise DataError(
            f"{path}: length {len(data)} is not a multiple of {RECORD_BYTES}; truncated record"
        )
    raw = np.frombuffer(data, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = raw[:, 0]
    bad = np.nonzero(labels > 9)[0]
    if bad.size:
        raise DataError(f"{path}: record {int(bad[0])} has label byte {int(labels[bad[0]])} > 9")
    return [CifarRecord(int(row[0]), row[1:].tobytes()) for row in raw]


def serialize_records(records: list[CifarRecord]) -> bytes:
    """Inverse of :func:`load_cifar10`; byte-identical round trip."""
    return b"".join(bytes([r.label]) + r.pixels for r in records)


def save_cifar10(path: str | Path, records: list[CifarRecord]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(serialize_records(records))


def record_to_chip(rec: CifarRecord) -> torch.Tensor:
    """Map pixel bytes to a 3x32x32 float chip: value = 2*byte/255 - 1."""
    arr = np.frombuffer(rec.pixels, dtype=np.uint8).reshape(CHIP_SHAPE).astype(np.float64)
    return torch.from_numpy((arr * (2.0 / 255.0) - 1.0).astype(np.float32))


def chip_to_bytes(chip: torch.Tensor) -> bytes:
    """Inverse quantization: byte = round(255 * (v + 1) / 2)."""
    arr = chip.detach().cpu().numpy()
    q = np.rint((arr + 1.0) * (255.0 / 2.0))
    return np.clip(q, 0, 255).astype(np.uint8).tobytes()


def records_to_tensor(records: list[CifarRecord]) -> torch.Tensor:
    """Vectorized :func:`record_to_chip`: (N, 3, 32, 32) float32."""
    if not records:
        return torch.zeros((0,) + CHIP_SHAPE, dtype=torch.float32)
    raw = np.stack([np.frombuffer(r.pixels, dtype=np.uint8) for r in records])
    arr = (raw.reshape((-1,) + CHIP_SHAPE).astype(np.float64) * (2.0 / 255.0) - 1.0).astype(np.float32)
    return torch.from_numpy(arr)


def record_labels(records: list[CifarRecord]) -> np.ndarray:
    return np.array([r.label for r in records], dtype=np.int64)


def area_downsample(chip: torch.Tensor, out_h: int, out_w: int) -> torch.Tensor:
    """Adaptive average pooling to (out_h, out_w).

    Output cell (i, j) averages input rows floor(i*H/out_h) .. ceil((i+1)*H/out_h)-1
    and the corresponding columns with equal weights.
    """
    return F.interpolate(chip.unsqueeze(0), size=(out_h, out_w), mode="area").squeeze(0)


def bilinear_resize(chip: torch.Tensor, out_h: int, out_w: int) -> torch.Tensor:
    """Bilinear resampling with half-pixel (align_corners=False) sampling."""
    return F.interpolate(
        chip.unsqueeze(0), size=(out_h, out_w), mode="bilinear", align_corners=False
    ).squeeze(0)


def gaussian_blur(chip: torch.Tensor, sigma: float) -> torch.Tensor:
    """Separable Gaussian blur with edge-clamped sampling.

    Kernel radius is ceil(3*sigma); indices outside the image clamp to the
    border, so the kernel mass is preserved for any sigma and image size.
    """
    if sigma <= 0:
        return chip
    radius = int(math.ceil(3.0 * sigma))
    offsets = torch.arange(-radius, radius + 1, dtype=torch.float32)
    kernel = torch.exp(-(offsets**2) / (2.0 * sigma * sigma))
    kernel = kernel / kernel.sum()

    def blur_axis(x: torch.Tensor, axis: int) -> torch.Tensor:
        n = x.shape[axis]
        idx = torch.arange(n).unsqueeze(1) + torch.arange(-radius, radius + 1).unsqueeze(0)
        idx = idx.clamp(0, n - 1)
        gathered = torch.index_select(x, axis, idx.reshape(-1))
        gathered = gathered.reshape(
            x.shape[:axis] + (n, 2 * radius + 1) + x.shape[axis + 1:]
        )
        w = kernel.reshape((1,) * (axis + 1) + (-1,) + (1,) * (x.dim() - axis - 1))
        return (gathered * w).sum(dim=axis + 1)

    out = blur_axis(chip, 1)
    return blur_axis(out, 2)


def degrade(chip: torch.Tensor, spec: DegradationSpec, seed: int) -> torch.Tensor:
    """Simulate distance: downsample, blur, noise, upsample, clamp.

    With the identity spec (scale 1, zero sigmas) the input is returned
    element-exactly. Output size always equals input size and the value
    range is clamped to [-1, 1].
    """
    c, h, w = chip.shape
    low_h = math.ceil(spec.scale_factor * h)
    low_w = math.ceil(spec.scale_factor * w)
    if low_h < 1 or low_w < 1:
        raise ValueError(f"scale_factor {spec.scale_factor} collapses a {h}x{w} chip")

    out = chip
    if (low_h, low_w) != (h, w):
        out = area_downsample(out, low_h, low_w)
    if spec.blur_sigma > 0:
        out = gaussian_blur(out, spec.blur_sigma)
    if spec.noise_sigma > 0:
        gen = torch.Generator().manual_seed(seed)
        out = out + torch.randn(out.shape, generator=gen) * spec.noise_sigma
    if out.shape != chip.shape:
        out = bilinear_resize(out, h, w)
    if spec.noise_sigma > 0 or spec.blur_sigma > 0 or (low_h, low_w) != (h, w):
        out = out.clamp(-1.0, 1.0)
    return out


def placement_pixels(box: Box, canvas_size: int) -> tuple[int, int, int, int]:
    """Pixel rectangle (x0, y0, w, h) a normalized box covers on the canvas."""
    x0 = int(math.floor((box.cx - box.w / 2.0) * canvas_size + 0.5))
    y0 = int(math.floor((box.cy - box.h / 2.0) * canvas_size + 0.5))
    pw = max(1, int(math.floor(box.w * canvas_size + 0.5)))
    ph = max(1, int(math.floor(box.h * canvas_size + 0.5)))
    x0 = min(max(x0, 0), canvas_size - pw)
    y0 = min(max(y0, 0), canvas_size - ph)
    return x0, y0, pw, ph


def smooth_background(canvas_size: int, seed: int, amplitude: float = BACKGROUND_AMPLITUDE) -> torch.Tensor:
    """Low-frequency seeded background in [-amplitude, amplitude]."""
    gen = torch.Generator().manual_seed(seed)
    coarse = (torch.rand((3, 8, 8), generator=gen) * 2.0 - 1.0) * amplitude
    return bilinear_resize(coarse, canvas_size, canvas_size)


def compose_scene(
    chips: list[tuple[torch.Tensor, int]],
    canvas_size: int,
    placements: list[tuple[Box, DegradationSpec]],
    seed: int,
    source_ids: list[int] | None = None,
) -> Scene:
    """Paste degraded chips onto a smooth background canvas.

    Placements must be pairwise non-overlapping beyond IoU 0.3 and lie
    inside the unit canvas. Object i is degraded with seed ``seed + 1 + i``
    (the background uses ``seed``), making composition fully deterministic.
    """
    if len(chips) != len(placements):
        raise ValueError(f"{len(chips)} chips but {len(placements)} placements")
    if source_ids is not None and len(source_ids) != len(chips):
        raise ValueError("source_ids length must match chips")
    for i, (box_a, _) in enumerate(placements):
        x0, y0, x1, y1 = box_a.corners()
        if x0 < -1e-9 or y0 < -1e-9 or x1 > 1 + 1e-9 or y1 > 1 + 1e-9:
            raise ValueError(f"placement {i} outside the unit canvas: {box_a}")
        for j in range(i + 1, len(placements)):
            overlap = iou(box_a, placements[j][0])
            if overlap > MAX_PLACEMENT_IOU:
                raise ValueError(
                    f"placements {i} and {j} overlap at IoU {overlap:.3f} > {MAX_PLACEMENT_IOU}"
                )

    canvas = smooth_background(canvas_size, seed)
    truths: list[GtBox] = []
    provenance: list[dict] = []
    for i, ((chip, class_id), (box, spec)) in enumerate(zip(chips, placements)):
        degrade_seed = seed + 1 + i
        worn = degrade(chip, spec, degrade_seed)
        x0, y0, pw, ph = placement_pixels(box, canvas_size)
        patch = bilinear_resize(worn, ph, pw)
        canvas[:, y0:y0 + ph, x0:x0 + pw] = patch
        truths.append(GtBox(box=box, class_id=class_id))
        provenance.append(
            {
                "source_id": int(source_ids[i]) if source_ids is not None else i,
                "class_id": int(class_id),
                "box": [box.cx, box.cy, box.w, box.h],
                "scale_factor": spec.scale_factor,
                "blur_sigma": spec.blur_sigma,
                "noise_sigma": spec.noise_sigma,
                "seed": degrade_seed,
            }
        )
    return Scene(canvas=canvas, truths=truths, provenance=provenance)


def sample_placements(
    n: int,
    rng: np.random.Generator,
    size_range: tuple[float, float] = (0.2, 0.32),
    max_tries: int = 200,
) -> list[Box]:
    """Rejection-sample n square boxes inside the canvas with IoU <= 0.3."""
    placed: list[Box] = []
    for _ in range(n):
        for attempt in range(max_tries):
            s = float(rng.uniform(*size_range))
            cx = float(rng.uniform(s / 2, 1 - s / 2))
            cy = float(rng.uniform(s / 2, 1 - s / 2))
            cand = Box(cx, cy, s, s)
            if all(iou(cand, p) <= MAX_PLACEMENT_IOU for p in placed):
                placed.append(cand)
                break
        else:
            raise RuntimeError(f"could not place {n} boxes after {max_tries} tries each")
    return placed


@dataclass(frozen=True)
class BenchConfig:
    """Benchmark composition parameters.

    Each scene gets one degradation level (a scale factor drawn round-robin
    from ``levels``) applied to all of its objects; blur and noise sigmas
    are shared. Scene i is composed with seed ``base_seed + i``.
    """

    n_scenes: int = 100
    objects_min: int = 2
    objects_max: int = 4
    levels: tuple[float, ...] = (0.25, 0.375, 0.5)
    blur_sigma: float = 0.5
    noise_sigma: float = 0.05
    canvas_size: int = 128
    size_range: tuple[float, float] = (0.2, 0.32)
    base_seed: int = 0

    def __post_init__(self):
        if self.n_scenes < 0 or self.objects_min < 0 or self.objects_max < self.objects_min:
            raise ValueError("invalid benchmark object counts")
        if not self.levels:
            raise ValueError("at least one degradation level required")


def build_benchmark(records: list[CifarRecord], cfg: BenchConfig) -> tuple[list[Scene], list[float]]:
    """Compose benchmark scenes from a CIFAR record pool.

    Returns the scenes and each scene's degradation level (its scale
    factor). Deterministic given the record list and config.
    """
    if not records:
        raise DataError("cannot build a benchmark from zero records")
    chips_all = records_to_tensor(records)
    labels_all = record_labels(records)
    scenes: list[Scene] = []
    levels_out: list[float] = []
    for i in range(cfg.n_scenes):
        scene_seed = cfg.base_seed + i
        rng = np.random.default_rng(scene_seed)
        level = cfg.levels[i % len(cfg.levels)]
        n_objects = int(rng.integers(cfg.objects_min, cfg.objects_max + 1))
        picks = rng.integers(0, len(records), size=n_objects)
        boxes = sample_placements(n_objects, rng, size_range=cfg.size_range)
        spec = DegradationSpec(level, cfg.blur_sigma, cfg.noise_sigma)
        chips = [(chips_all[int(k)], int(labels_all[int(k)])) for k in picks]
        placements = [(b, spec) for b in boxes]
        scene = compose_scene(
            chips, cfg.canvas_size, placements, seed=scene_seed,
            source_ids=[int(k) for k in picks],
        )
        scenes.append(scene)
        levels_out.append(level)
    return scenes, levels_out


def chip_to_image(chip: torch.Tensor) -> Image.Image:
    """Render a chip to an 8-bit RGB image (byte = round(255 * (v+1)/2))."""
    arr = chip.detach().cpu().numpy()
    q = np.clip(np.rint((arr + 1.0) * (255.0 / 2.0)), 0, 255).astype(np.uint8)
    return Image.fromarray(np.transpose(q, (1, 2, 0)), mode="RGB")


def image_to_chip(img: Image.Image) -> torch.Tensor:
    arr = np.asarray(img.convert("RGB"), dtype=np.float64)
    return torch.from_numpy((np.transpose(arr, (2, 0, 1)) * (2.0 / 255.0) - 1.0).astype(np.float32))


def save_scene_archive(scenes: list[Scene], out_dir: str | Path, prefix: str = "scene") -> None:
    """Write each scene as a lossless PNG plus a JSON truth/provenance sidecar."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, scene in enumerate(scenes):
        stem = f"{prefix}_{i:05d}"
        chip_to_image(scene.canvas).save(out_dir / f"{stem}.png")
        sidecar = {
            "id": i,
            "truths": [
                {
                    "class_id": t.class_id,
                    "cx": t.box.cx,
                    "cy": t.box.cy,
                    "w": t.box.w,
                    "h": t.box.h,
                }
                for t in scene.truths
            ],
            "provenance": scene.provenance,
        }
        (out_dir / f"{stem}.json").write_text(json.dumps(sidecar, sort_keys=True, indent=1))


def load_scene_archive(in_dir: str | Path, prefix: str = "scene") -> list[Scene]:
    """Read scenes written by :func:`save_scene_archive`."""
    in_dir = Path(in_dir)
    if not in_dir.is_dir():
        raise DataError(f"scene archive directory not found: {in_dir}")
    sidecars = sorted(in_dir.glob(f"{prefix}_*.json"))
    if not sidecars:
        raise DataError(f"no {prefix}_*.json sidecars in {in_dir}")
    scenes = []
    for sidecar_path in sidecars:
        png_path = sidecar_path.with_suffix(".png")
        if not png_path.exists():
            raise DataError(f"missing canvas image {png_path}")
        meta = json.loads(sidecar_path.read_text())
        canvas = image_to_chip(Image.open(png_path))
        truths = [
            GtBox(box=Box(t["cx"], t["cy"], t["w"], t["h"]), class_id=int(t["class_id"]))
            for t in meta["truths"]
        ]
        scenes.append(Scene(canvas=canvas, truths=truths, provenance=meta.get("provenance", [])))
    return scenes
