"""Procedural CIFAR-format image farm.

Generates 32x32 RGB chips for ten synthetic object classes and writes
them in the exact CIFAR-10 binary layout (label byte + 3072 pixel bytes),
so the whole pipeline can run offline where the real dataset cannot be
downloaded. Classes are geometric patterns with per-sample jitter in
position, size, phase and hue:

    0 disk        1 square outline   2 horizontal stripes
    3 vertical stripes   4 diagonal cross   5 triangle
    6 checkerboard       7 ring             8 soft blob
    9 plus sign

Each class keeps a characteristic hue band so that color carries some
class signal, while geometry carries the rest; fine textures (stripes,
checkerboard) lose their signal under heavy downsampling, which is what
the distance benchmark needs. Edges are softened and every chip carries
broadband pixel noise: perfectly crisp, noise-free art is separable from
early generator output by trivial statistics, which starves adversarial
training of gradient at small iteration counts.
"""

from __future__ import annotations

import colorsys
from pathlib import Path

import numpy as np

from .dataset_io import CifarRecord, save_cifar10

CLASS_NAMES = (
    "disk", "square", "h_stripes", "v_stripes", "cross",
    "triangle", "checker", "ring", "blob", "plus",
)

_SIZE = 32


def _hsv(h: float, s: float, v: float) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb(h % 1.0, float(np.clip(s, 0, 1)), float(np.clip(v, 0, 1))))


def _class_color(class_id: int, rng: np.random.Generator) -> np.ndarray:
    hue = class_id / 10.0 + rng.uniform(-0.04, 0.04)
    return _hsv(hue, rng.uniform(0.6, 0.95), rng.uniform(0.7, 1.0))


def _pattern_mask(class_id: int, rng: np.random.Generator) -> np.ndarray:
    """Boolean or float [0,1] foreground mask for one sample."""
    yy, xx = np.mgrid[0:_SIZE, 0:_SIZE].astype(np.float64)
    cx = 16.0 + rng.uniform(-4, 4)
    cy = 16.0 + rng.uniform(-4, 4)
    dx, dy = xx - cx, yy - cy
    rr = np.hypot(dx, dy)

    if class_id == 0:  # disk
        return rr <= rng.uniform(8, 12)
    if class_id == 1:  # square outline
        half = rng.uniform(8, 12)
        thick = rng.uniform(2, 3.5)
        cheb = np.maximum(np.abs(dx), np.abs(dy))
        return (cheb <= half) & (cheb >= half - thick)
    if class_id == 2:  # horizontal stripes
        period = rng.uniform(4, 7)
        return ((yy + rng.uniform(0, period)) % period) < period / 2
    if class_id == 3:  # vertical stripes
        period = rng.uniform(4, 7)
        return ((xx + rng.uniform(0, period)) % period) < period / 2
    if class_id == 4:  # diagonal cross
        thick = rng.uniform(2, 3.5)
        return (np.abs(dx - dy) < thick) | (np.abs(dx + dy) < thick)
    if class_id == 5:  # triangle
        height = rng.uniform(16, 24)
        top = cy - height / 2
        flip = rng.random() < 0.5
        t = (yy - top) / height
        if flip:
            t = 1.0 - t
        return (t >= 0) & (t <= 1) & (np.abs(dx) <= t * rng.uniform(8, 12))
    if class_id == 6:  # checkerboard
        cell = rng.uniform(4, 7)
        px, py = rng.uniform(0, cell, size=2)
        return (((xx + px) // cell) + ((yy + py) // cell)) % 2 < 1
    if class_id == 7:  # ring
        outer = rng.uniform(10, 14)
        inner = outer - rng.uniform(3, 5)
        return (rr <= outer) & (rr >= inner)
    if class_id == 8:  # soft radial blob
        sigma = rng.uniform(4, 7)
        return np.exp(-(rr**2) / (2 * sigma**2))
    if class_id == 9:  # plus sign
        thick = rng.uniform(2, 4)
        half = rng.uniform(9, 13)
        return ((np.abs(dx) < thick) & (np.abs(dy) <= half)) | (
            (np.abs(dy) < thick) & (np.abs(dx) <= half)
        )
    raise ValueError(f"class_id {class_id} outside 0..9")


def _soften(mask: np.ndarray) -> np.ndarray:
    """Two passes of a 3x3 box filter; keeps edges about a pixel wide."""
    out = mask.astype(np.float64)
    for _ in range(2):
        padded = np.pad(out, 1, mode="edge")
        out = sum(
            padded[1 + dy:_SIZE + 1 + dy, 1 + dx:_SIZE + 1 + dx]
            for dy in (-1, 0, 1)
            for dx in (-1, 0, 1)
        ) / 9.0
    return out


def render_chip_array(class_id: int, rng: np.random.Generator) -> np.ndarray:
    """One synthetic sample as a (3, 32, 32) uint8 array."""
    bg_a = _hsv(rng.uniform(0, 1), rng.uniform(0.1, 0.5), rng.uniform(0.15, 0.75))
    bg_b = _hsv(rng.uniform(0, 1), rng.uniform(0.1, 0.5), rng.uniform(0.15, 0.75))
    fg = _class_color(class_id, rng)
    # Smooth two-color gradient background at a random orientation.
    yy, xx = np.mgrid[0:_SIZE, 0:_SIZE].astype(np.float64) / (_SIZE - 1)
    angle = rng.uniform(0, 2 * np.pi)
    t = (np.cos(angle) * xx + np.sin(angle) * yy + 1.0) / 2.0
    img = bg_a[:, None, None] * (1.0 - t[None]) + bg_b[:, None, None] * t[None]
    mask = _soften(_pattern_mask(class_id, rng))
    shade = 1.0 + rng.normal(0.0, 0.08, size=(_SIZE, _SIZE))
    img = img * (1.0 - mask[None]) + (fg[:, None, None] * shade[None]) * mask[None]
    img = img + rng.normal(0.0, 0.05, size=img.shape)
    return (np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def make_synthetic_records(n: int, seed: int) -> list[CifarRecord]:
    """n records with labels cycling 0..9, deterministic in (n, seed).

    Labels interleave so any prefix is class-balanced, which lets callers
    slice subsets without losing classes.
    """
    records = []
    for i in range(n):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        label = i % 10
        arr = render_chip_array(label, rng)
        records.append(CifarRecord(label, arr.tobytes()))
    return records


def write_synthetic_cifar(
    out_dir: str | Path, n_train: int = 12000, n_test: int = 2000, seed: int = 0
) -> dict[str, Path]:
    """Write train/test splits in the CIFAR-10 binary file layout.

    Training records are spread over data_batch_1.bin .. data_batch_5.bin;
    the test split goes to test_batch.bin. The test split uses a disjoint
    seed stream from the training split.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train = make_synthetic_records(n_train, seed)
    test = make_synthetic_records(n_test, seed + 1_000_003)
    paths: dict[str, Path] = {}
    per_file = (n_train + 4) // 5
    for k in range(5):
        chunk = train[k * per_file:(k + 1) * per_file]
        p = out_dir / f"data_batch_{k + 1}.bin"
        save_cifar10(p, chunk)
        paths[p.name] = p
    p = out_dir / "test_batch.bin"
    save_cifar10(p, test)
    paths[p.name] = p
    return paths
