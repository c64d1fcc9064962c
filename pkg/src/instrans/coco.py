"""Convert one category of a COCO instances file into mask PNGs + manifest."""
from __future__ import annotations

import json
from collections import defaultdict
from pathlib import Path
from typing import Tuple

import numpy as np
import torch
from pycocotools import mask as mask_utils

from .data import DatasetManifest, ManifestEntry, write_mask


class IngestionError(Exception):
    pass


def decode_segmentation(segmentation, height: int, width: int) -> np.ndarray:
    """Decode a COCO ``segmentation`` field (polygons, RLE or compressed RLE) to a uint8 mask."""
    try:
        if isinstance(segmentation, list):
            rles = mask_utils.frPyObjects(segmentation, height, width)
            rle = mask_utils.merge(rles)
        elif isinstance(segmentation, dict) and isinstance(segmentation.get("counts"), list):
            rle = mask_utils.frPyObjects(segmentation, height, width)
        elif isinstance(segmentation, dict) and isinstance(segmentation.get("counts"), (str, bytes)):
            rle = dict(segmentation)
            if isinstance(rle["counts"], str):
                rle["counts"] = rle["counts"].encode("ascii")
        else:
            raise ValueError(f"unsupported segmentation type {type(segmentation).__name__}")
        m = mask_utils.decode(rle)
    except Exception as exc:
        raise IngestionError(f"undecodable segmentation: {exc}") from exc
    if m.shape != (height, width):
        raise IngestionError(f"decoded mask has shape {m.shape}, expected {(height, width)}")
    return m.astype(np.uint8)


def ingest_coco_category(annotation_path, image_dir, category: str, out_dir, domain: str = "X",
                         resolution: Tuple[int, int] = (200, 200), include_crowd: bool = False) -> DatasetManifest:
    """Write one binary mask PNG per instance of ``category`` and a manifest.

    Images without an instance of the category are left out.  Crowd regions
    are skipped unless ``include_crowd``.  Image paths in the manifest point
    at the original files under ``image_dir``.
    """
    with open(annotation_path) as f:
        coco = json.load(f)
    cats = {c["name"]: c["id"] for c in coco.get("categories", [])}
    if category not in cats:
        raise IngestionError(f"unknown category {category!r}; available: {sorted(cats)}")
    cat_id = cats[category]

    per_image = defaultdict(list)
    for ann in coco.get("annotations", []):
        if ann.get("category_id") != cat_id:
            continue
        if ann.get("iscrowd", 0) and not include_crowd:
            continue
        per_image[ann["image_id"]].append(ann)

    out_dir = Path(out_dir)
    entries = []
    for img in sorted(coco.get("images", []), key=lambda im: im["id"]):
        anns = sorted(per_image.get(img["id"], []), key=lambda a: a["id"])
        if not anns:
            continue
        h, w = img["height"], img["width"]
        stem = Path(img["file_name"]).stem
        mask_paths = []
        for ann in anns:
            m = decode_segmentation(ann["segmentation"], h, w)
            p = out_dir / "masks" / f"{stem}_{ann['id']}.png"
            write_mask(torch.from_numpy(m.astype(np.float32)), p)
            mask_paths.append(p)
        entries.append(ManifestEntry(Path(image_dir) / img["file_name"], mask_paths, domain))

    manifest = DatasetManifest(entries, tuple(resolution), f"coco {Path(annotation_path).name} category={category}")
    manifest.save(out_dir / "manifest.json")
    return manifest
