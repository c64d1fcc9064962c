"""Two-domain synthetic shape dataset.

Each image carries a few flat-coloured instances of one shape kind on a
smooth textured background.  Both domains draw fill colours and backgrounds
from the same distributions, so shape is the only thing that tells them
apart.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import List, Tuple

import numpy as np
import torch
from PIL import Image, ImageDraw

from .data import DatasetManifest, Sample, save_dataset

SHAPES = ("circle", "triangle", "square")

# every colour has a channel outside the background's value range
PALETTE = (
    (225, 45, 45),
    (40, 95, 225),
    (235, 205, 30),
    (35, 170, 60),
    (210, 40, 200),
    (20, 200, 210),
)


@dataclass(frozen=True)
class SyntheticSpec:
    num_samples: int = 200
    instances_per_image: Tuple[int, int] = (1, 2)
    shape_X: str = "circle"
    shape_Y: str = "triangle"
    size_range: Tuple[int, int] = (18, 30)
    resolution: Tuple[int, int] = (64, 64)
    background_cells: int = 4
    background_range: Tuple[int, int] = (70, 185)
    background_jitter: int = 6
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.instances_per_image
        if not 1 <= lo <= hi:
            raise ValueError("instances_per_image must satisfy 1 <= lo <= hi")
        if self.shape_X not in SHAPES or self.shape_Y not in SHAPES:
            raise ValueError(f"shapes must be among {SHAPES}")
        smin, smax = self.size_range
        if not 3 <= smin <= smax <= min(self.resolution):
            raise ValueError("size_range must fit inside the image")
        blo, bhi = self.background_range
        if not (41 <= blo - self.background_jitter and bhi + self.background_jitter <= 214):
            raise ValueError("background values must stay within [41, 214] so they never equal a fill colour")
        if self.num_samples < 0:
            raise ValueError("num_samples must be >= 0")


def _background(rng: np.random.Generator, spec: SyntheticSpec) -> np.ndarray:
    h, w = spec.resolution
    lo, hi = spec.background_range
    cells = rng.integers(lo, hi + 1, size=(spec.background_cells, spec.background_cells, 3), dtype=np.uint8)
    smooth = np.asarray(Image.fromarray(cells, "RGB").resize((w, h), Image.BILINEAR), dtype=np.int16)
    jitter = rng.integers(-spec.background_jitter, spec.background_jitter + 1, size=smooth.shape)
    return np.clip(smooth + jitter, lo - spec.background_jitter, hi + spec.background_jitter).astype(np.uint8)


def draw_shape(kind: str, size: int, top: int, left: int, resolution: Tuple[int, int]) -> np.ndarray:
    """Boolean ``[H, W]`` mask of one shape inside the box at (top, left)."""
    h, w = resolution
    canvas = Image.new("L", (w, h), 0)
    d = ImageDraw.Draw(canvas)
    x0, y0, x1, y1 = left, top, left + size - 1, top + size - 1
    if kind == "circle":
        d.ellipse([x0, y0, x1, y1], fill=255)
    elif kind == "square":
        d.rectangle([x0, y0, x1, y1], fill=255)
    elif kind == "triangle":
        d.polygon([((x0 + x1) / 2, y0), (x0, y1), (x1, y1)], fill=255)
    else:
        raise ValueError(f"unknown shape {kind!r}")
    return np.asarray(canvas) > 0


def _render(rng: np.random.Generator, spec: SyntheticSpec, kind: str) -> Tuple[np.ndarray, List[np.ndarray], List[tuple]]:
    h, w = spec.resolution
    image = _background(rng, spec)
    k = int(rng.integers(spec.instances_per_image[0], spec.instances_per_image[1] + 1))
    shapes, colors = [], []
    occupied = np.zeros((h, w), bool)
    for _ in range(k):
        size = int(rng.integers(spec.size_range[0], spec.size_range[1] + 1))
        # prefer a free spot; overlap is allowed once the attempts run out
        for _attempt in range(20):
            top = int(rng.integers(0, h - size + 1))
            left = int(rng.integers(0, w - size + 1))
            m = draw_shape(kind, size, top, left, spec.resolution)
            if not (m & occupied).any():
                break
        occupied |= m
        shapes.append(m)
        colors.append(PALETTE[int(rng.integers(len(PALETTE)))])

    visible = []
    for i, m in enumerate(shapes):
        later = np.zeros_like(m)
        for other in shapes[i + 1:]:
            later |= other
        visible.append(m & ~later)
    masks, fills = [], []
    for m, c, v in zip(shapes, colors, visible):
        image[m] = c
    for v, c in zip(visible, colors):
        if v.any():
            masks.append(v)
            fills.append(c)
    return image, masks, fills


def synthesize(spec: SyntheticSpec, domain: str) -> List[Sample]:
    """Generate one domain's samples in memory (deterministic in ``spec.seed``)."""
    kind = spec.shape_X if domain == "X" else spec.shape_Y
    rng = np.random.default_rng([spec.seed, 0 if domain == "X" else 1])
    samples = []
    for i in range(spec.num_samples):
        image, masks, _ = _render(rng, spec, kind)
        img = torch.from_numpy(image.astype(np.float32)).permute(2, 0, 1) / 127.5 - 1.0
        msk = torch.from_numpy(np.stack(masks).astype(np.float32))[:, None]
        samples.append(Sample(img, msk, domain, f"{domain}_{i:05d}"))
    return samples


def generate_synthetic(spec: SyntheticSpec, out_dir) -> Tuple[DatasetManifest, DatasetManifest]:
    """Write both domains under ``out_dir/X`` and ``out_dir/Y``."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out_dir}: {exc}") from exc
    source = "synthetic " + " ".join(f"{k}={v}" for k, v in dataclasses.asdict(spec).items())
    manifests = []
    for domain in ("X", "Y"):
        samples = synthesize(spec, domain)
        manifests.append(save_dataset(samples, out_dir / domain, spec.resolution, source))
    return manifests[0], manifests[1]
