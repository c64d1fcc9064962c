"""Samples, manifests, preprocessing and instance mini-batching.

Stored masks are binary ``{0, 1}`` tensors shaped ``[N, 1, H, W]``; images are
``[3, H, W]`` in ``[-1, 1]``.  :func:`to_network_range` maps masks to
``[-1, 1]`` right before they enter a network.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from torch import Tensor

DOMAINS = ("X", "Y")


class DatasetError(Exception):
    """A manifest or one of the files it references could not be used."""


@dataclass
class Sample:
    image: Tensor  # [3, H, W], [-1, 1]
    masks: Tensor  # [N, 1, H, W], {0, 1}
    domain: str
    id: str

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise ValueError(f"domain must be one of {DOMAINS}, got {self.domain!r}")
        if self.masks.dim() != 4 or self.masks.shape[1] != 1:
            raise ValueError("masks must be shaped [N, 1, H, W]")
        if self.masks.shape[0] and self.masks.shape[2:] != self.image.shape[1:]:
            raise ValueError(f"sample {self.id}: image and masks must share H x W")

    @property
    def num_instances(self) -> int:
        return self.masks.shape[0]

    @property
    def is_empty(self) -> bool:
        return self.masks.shape[0] == 0


@dataclass
class ManifestEntry:
    image: Path
    masks: List[Path]
    domain: str


@dataclass
class DatasetManifest:
    entries: List[ManifestEntry]
    resolution: Tuple[int, int]
    source: str = ""
    path: Optional[Path] = None

    def __len__(self):
        return len(self.entries)

    def to_json(self, base_dir: Optional[Path] = None) -> dict:
        def rel(p: Path) -> str:
            return os.path.relpath(p, base_dir) if base_dir is not None else str(p)

        return {
            "resolution": list(self.resolution),
            "source": self.source,
            "entries": [
                {"image": rel(e.image), "masks": [rel(m) for m in e.masks], "domain": e.domain}
                for e in self.entries
            ],
        }

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            json.dump(self.to_json(path.parent), f, indent=1)
            f.write("\n")
        self.path = path
        return path


def to_network_range(masks: Tensor) -> Tensor:
    return masks * 2.0 - 1.0


def to_unit_range(masks: Tensor) -> Tensor:
    return (masks + 1.0) * 0.5


def _decodes(path: Path) -> Tuple[int, int]:
    try:
        with Image.open(path) as im:
            im.verify()
        with Image.open(path) as im:
            return im.size
    except Exception as exc:
        raise DatasetError(f"cannot decode {path}: {exc}") from exc


def load_manifest(manifest_path, resolution: Optional[Tuple[int, int]] = None) -> DatasetManifest:
    """Read and validate a manifest JSON file.

    Paths inside the manifest are resolved relative to the manifest's
    directory.  Every referenced file must exist and decode, and every mask
    must have its image's size.  When ``resolution`` is given it must match
    the manifest's declared resolution.
    """
    path = Path(manifest_path)
    try:
        with open(path) as f:
            raw = json.load(f)
    except FileNotFoundError as exc:
        raise DatasetError(f"manifest not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise DatasetError(f"malformed manifest {path}: {exc}") from exc

    if not isinstance(raw, dict) or "resolution" not in raw or "entries" not in raw:
        raise DatasetError(f"malformed manifest {path}: needs 'resolution' and 'entries'")
    res = raw["resolution"]
    if not (isinstance(res, list) and len(res) == 2 and all(isinstance(v, int) and v > 0 for v in res)):
        raise DatasetError(f"malformed manifest {path}: resolution must be [H, W] positive integers")
    res = (res[0], res[1])
    if resolution is not None and tuple(resolution) != res:
        raise DatasetError(f"resolution mismatch in {path}: manifest has {res}, expected {tuple(resolution)}")
    if not isinstance(raw["entries"], list):
        raise DatasetError(f"malformed manifest {path}: 'entries' must be a list")

    base = path.parent
    entries = []
    for i, e in enumerate(raw["entries"]):
        if not isinstance(e, dict) or not isinstance(e.get("image"), str) or not isinstance(e.get("masks"), list):
            raise DatasetError(f"malformed manifest {path}: entry {i} needs 'image' and 'masks'")
        if e.get("domain") not in DOMAINS:
            raise DatasetError(f"malformed manifest {path}: entry {i} has domain {e.get('domain')!r}")
        image = base / e["image"]
        masks = [base / m for m in e["masks"]]
        for p in [image, *masks]:
            if not p.is_file():
                raise DatasetError(f"manifest {path}, entry {i}: missing file {p}")
        size = _decodes(image)
        for m in masks:
            if _decodes(m) != size:
                raise DatasetError(f"manifest {path}, entry {i}: mask {m} does not match image size {size}")
        entries.append(ManifestEntry(image, masks, e["domain"]))
    return DatasetManifest(entries, res, str(raw.get("source", "")), path)


def read_image(path) -> Tensor:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32)
    return torch.from_numpy(arr).permute(2, 0, 1) / 127.5 - 1.0


def read_mask(path) -> Tensor:
    arr = np.asarray(Image.open(path).convert("L"))
    return torch.from_numpy((arr >= 128).astype(np.float32))[None]


def write_image(image: Tensor, path) -> None:
    arr = ((image.detach().float().clamp(-1, 1) + 1) * 127.5).round().to(torch.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr.permute(1, 2, 0).cpu().numpy(), "RGB").save(path)


def write_mask(mask: Tensor, path) -> None:
    """Write a ``[1, H, W]`` or ``[H, W]`` mask in ``{0, 1}`` as a 0/255 PNG."""
    arr = (mask.detach().reshape(mask.shape[-2:]) >= 0.5).cpu().numpy().astype(np.uint8) * 255
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, "L").save(path)


def load_sample(entry: ManifestEntry) -> Sample:
    image = read_image(entry.image)
    if entry.masks:
        masks = torch.stack([read_mask(m) for m in entry.masks])
    else:
        masks = image.new_zeros((0, 1, *image.shape[1:]))
    return Sample(image, masks, entry.domain, entry.image.stem)


def preprocess(sample: Sample, resolution: Tuple[int, int], min_instance_area: int = 1) -> Sample:
    """Resize to ``resolution`` (H, W) and drop masks that become too small.

    Images and masks are resized bilinearly without preserving aspect ratio;
    masks are re-binarised at 0.5.  A sample whose masks are all dropped comes
    back with ``is_empty`` set and is left to the caller to skip.
    """
    size = tuple(resolution)
    image = sample.image
    if image.shape[1:] != size:
        image = F.interpolate(image[None], size=size, mode="bilinear", align_corners=False)[0]
    image = image.clamp(-1.0, 1.0)
    masks = sample.masks
    if masks.shape[0] and masks.shape[2:] != size:
        masks = F.interpolate(masks, size=size, mode="bilinear", align_corners=False)
    masks = (masks >= 0.5).to(image.dtype)
    if masks.shape[0] == 0:
        masks = image.new_zeros((0, 1, *size))
    keep = masks.flatten(1).sum(1) >= min_instance_area
    return replace(sample, image=image, masks=masks[keep])


def instance_areas(masks: Tensor) -> Tensor:
    """Foreground pixel count per mask; works for {0,1} and [-1,1] masks."""
    return (masks > 0).flatten(1).sum(1)


def instance_order(masks: Tensor) -> Tensor:
    """Indices sorting masks by decreasing area, ties kept in input order."""
    return torch.sort(instance_areas(masks), descending=True, stable=True).indices


def order_instances(masks: Tensor) -> Tensor:
    return masks[instance_order(masks)]


def partition_minibatches(masks: Tensor, batch_size: int) -> List[Tensor]:
    """Split an ordered mask set into contiguous chunks of ``batch_size``."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    return [masks[i:i + batch_size] for i in range(0, masks.shape[0], batch_size)]


def pad_mask_set(masks: Tensor, capacity: int) -> Tuple[Tensor, Tensor]:
    """Append all-background masks up to ``capacity``; returns (masks, valid)."""
    n = masks.shape[0]
    if n > capacity:
        raise ValueError(f"{n} masks exceed capacity {capacity}")
    pad = masks.new_zeros((capacity - n, *masks.shape[1:]))
    valid = torch.arange(capacity) < n
    return torch.cat([masks, pad]), valid


@dataclass
class Dataset:
    """An in-memory, preprocessed list of samples for one domain."""

    samples: List[Sample]
    domain: str
    manifest: Optional[DatasetManifest] = None
    skipped: List[str] = field(default_factory=list)

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i) -> Sample:
        return self.samples[i]


def load_dataset(manifest, resolution: Optional[Tuple[int, int]] = None, min_instance_area: int = 1,
                 max_instances: Optional[int] = None) -> Dataset:
    """Load and preprocess every entry of a manifest.

    Samples left without masks are skipped.  With ``max_instances`` the
    largest masks are kept.
    """
    if not isinstance(manifest, DatasetManifest):
        manifest = load_manifest(manifest)
    res = tuple(resolution) if resolution is not None else manifest.resolution
    samples, skipped = [], []
    domains = {e.domain for e in manifest.entries}
    if len(domains) > 1:
        raise DatasetError(f"manifest mixes domains {sorted(domains)}")
    for entry in manifest.entries:
        s = preprocess(load_sample(entry), res, min_instance_area)
        if s.is_empty:
            skipped.append(s.id)
            continue
        s = replace(s, masks=order_instances(s.masks))
        if max_instances is not None:
            s = replace(s, masks=s.masks[:max_instances])
        samples.append(s)
    domain = domains.pop() if domains else "X"
    return Dataset(samples, domain, manifest, skipped)


def split_dataset(dataset: Dataset, holdout: float, seed: int) -> Tuple[Dataset, Dataset]:
    """Random disjoint split; the second part holds ``holdout`` of the samples."""
    rng = np.random.default_rng(seed)
    idx = rng.permutation(len(dataset))
    n_hold = int(round(len(dataset) * holdout))
    hold, train = sorted(idx[:n_hold]), sorted(idx[n_hold:])
    return (Dataset([dataset[i] for i in train], dataset.domain),
            Dataset([dataset[i] for i in hold], dataset.domain))


def save_dataset(samples: Sequence[Sample], out_dir, resolution: Tuple[int, int], source: str = "") -> DatasetManifest:
    """Write samples as PNG files plus ``manifest.json`` under ``out_dir``."""
    out_dir = Path(out_dir)
    entries = []
    for s in samples:
        img_path = out_dir / "images" / f"{s.id}.png"
        write_image(s.image, img_path)
        mask_paths = []
        for k in range(s.num_instances):
            mp = out_dir / "masks" / f"{s.id}_{k}.png"
            write_mask(s.masks[k], mp)
            mask_paths.append(mp)
        entries.append(ManifestEntry(img_path, mask_paths, s.domain))
    manifest = DatasetManifest(entries, tuple(resolution), source)
    manifest.save(out_dir / "manifest.json")
    return manifest
