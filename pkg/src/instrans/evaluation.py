"""Translation metrics and diagnostics.

* classification score: fraction of translated images a domain classifier
  assigns to the target domain, plus a variant that blanks everything outside
  the instance masks first;
* background preservation: mean |x - y'| where a pixel is background both
  before and after translation;
* nearest training masks of a translated mask, and a crop-and-attach
  baseline built on the same nearest-neighbour search.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .data import Sample
from .losses import context_weight

log = logging.getLogger(__name__)

DOMAIN_INDEX = {"X": 0, "Y": 1}


class ClassifierAccuracyError(RuntimeError):
    """The domain classifier cannot tell real samples apart well enough."""


class DomainCNN(nn.Module):
    """Three conv/pool stages, global max pooling, linear head."""

    def __init__(self, width: int = 16):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(3, width, 3, padding=1), nn.ReLU(True), nn.MaxPool2d(2),
            nn.Conv2d(width, width * 2, 3, padding=1), nn.ReLU(True), nn.MaxPool2d(2),
            nn.Conv2d(width * 2, width * 4, 3, padding=1), nn.ReLU(True), nn.MaxPool2d(2),
        )
        self.classifier = nn.Linear(width * 4, 2)

    def forward(self, x):
        return self.classifier(self.features(x).amax(dim=(2, 3)))


@dataclass
class DomainClassifier:
    model: DomainCNN
    heldout_accuracy: float
    n_train: int
    n_heldout: int
    seed: int

    @torch.no_grad()
    def predict(self, images: Tensor, batch: int = 256) -> Tensor:
        """Predicted domain index (0 = X, 1 = Y) for ``[B, 3, H, W]`` images."""
        self.model.eval()
        out = [self.model(images[i:i + batch].float()).argmax(1) for i in range(0, len(images), batch)]
        return torch.cat(out) if out else torch.zeros(0, dtype=torch.long)


def _stack(images) -> Tensor:
    if torch.is_tensor(images):
        return images
    return torch.stack(list(images))


def train_domain_classifier(train_X: Sequence[Sample], train_Y: Sequence[Sample], heldout_X: Sequence[Sample],
                            heldout_Y: Sequence[Sample], seed: int = 0, epochs: int = 15, min_accuracy: float = 0.95,
                            width: int = 16, min_updates: int = 180) -> DomainClassifier:
    """Train a 4-layer CNN to tell the domains apart from real images.

    Raises :class:`ClassifierAccuracyError` when held-out accuracy falls
    below ``min_accuracy``; scores from such a classifier mean nothing.
    Small datasets get extra epochs so that at least ``min_updates``
    optimizer steps are taken.
    """
    if not (train_X and train_Y and heldout_X and heldout_Y):
        raise ValueError("classifier needs non-empty train and held-out sets for both domains")
    images = torch.cat([_stack(s.image for s in train_X), _stack(s.image for s in train_Y)])
    labels = torch.cat([torch.zeros(len(train_X), dtype=torch.long), torch.ones(len(train_Y), dtype=torch.long)])
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = DomainCNN(width)
        opt = torch.optim.Adam(model.parameters(), lr=2e-3)
        gen = torch.Generator().manual_seed(seed)
        epochs = max(epochs, math.ceil(min_updates / math.ceil(len(images) / 32)))
        for _ in range(epochs):
            model.train()
            perm = torch.randperm(len(images), generator=gen)
            for i in range(0, len(perm), 32):
                idx = perm[i:i + 32]
                batch = images[idx]
                # random flips keep the classifier from keying on placement
                if torch.rand((), generator=gen) < 0.5:
                    batch = batch.flip(3)
                loss = F.cross_entropy(model(batch), labels[idx])
                opt.zero_grad()
                loss.backward()
                opt.step()
    clf = DomainClassifier(model, 0.0, len(images), len(heldout_X) + len(heldout_Y), seed)
    correct = (clf.predict(_stack(s.image for s in heldout_X)) == 0).sum().item()
    correct += (clf.predict(_stack(s.image for s in heldout_Y)) == 1).sum().item()
    clf.heldout_accuracy = correct / clf.n_heldout
    log.info("domain classifier held-out accuracy %.3f", clf.heldout_accuracy)
    if clf.heldout_accuracy < min_accuracy:
        raise ClassifierAccuracyError(
            f"held-out accuracy {clf.heldout_accuracy:.3f} below {min_accuracy} "
            f"({clf.n_train} training images, {clf.n_heldout} held out); the domains are not separable")
    return clf


def classification_score(classifier: DomainClassifier, images, target_domain: str) -> float:
    images = _stack(images)
    if len(images) == 0:
        raise ValueError("classification score needs at least one image")
    pred = classifier.predict(images)
    return (pred == DOMAIN_INDEX[target_domain]).float().mean().item()


def mask_out_background(image: Tensor, masks: Tensor) -> Tensor:
    """Set pixels outside the mask union to 0 (mid-gray); masks in network range."""
    if masks.shape[0] == 0:
        union = torch.zeros((1, *image.shape[1:]), dtype=torch.bool)
    else:
        if masks.shape[2:] != image.shape[1:]:
            raise ValueError("masks and image differ in size")
        union = (masks > 0).any(dim=0)
    return torch.where(union, image, torch.zeros_like(image))


def masked_classification_score(classifier: DomainClassifier, images, masks: Sequence[Tensor],
                                target_domain: str) -> float:
    images = _stack(images)
    if len(images) != len(masks):
        raise ValueError("need one mask set per image")
    masked = torch.stack([mask_out_background(img, m) for img, m in zip(images, masks)])
    return classification_score(classifier, masked, target_domain)


def background_preservation_error(image: Tensor, masks: Tensor, translated_image: Tensor,
                                  translated_masks: Tensor) -> Optional[float]:
    """Mean |x - y'| over pixels that are background in both mask sets.

    ``masks`` are the original {0, 1} masks, ``translated_masks`` are network
    range and binarised at 0.  Returns None when no such pixel exists.
    """
    if image.shape != translated_image.shape:
        raise ValueError("image shapes differ")
    w = context_weight(masks.float(), (translated_masks > 0).float())
    support = (w == 1).expand_as(image)
    if not support.any():
        return None
    return (image - translated_image).abs()[support].mean().item()


def nearest_neighbor_masks(query: Tensor, corpus: Tensor, k: int) -> List[Tuple[int, float]]:
    """The ``k`` corpus masks closest to ``query`` in L2, ascending, ties by index."""
    n = corpus.shape[0]
    if k > n:
        raise ValueError(f"k={k} exceeds corpus size {n}")
    q = query.reshape(1, -1).double()
    c = corpus.reshape(n, -1).double()
    d = ((c - q) ** 2).sum(1).sqrt().numpy()
    order = np.lexsort((np.arange(n), d))[:k]
    return [(int(i), float(d[i])) for i in order]


@dataclass
class MaskCorpus:
    """Every instance mask of a dataset, with the sample each came from."""

    masks: Tensor  # [K, 1, H, W] in {0, 1}
    owners: List[Tuple[int, int]]  # (sample index, mask index)

    @classmethod
    def from_samples(cls, samples: Sequence[Sample]) -> "MaskCorpus":
        masks, owners = [], []
        for i, s in enumerate(samples):
            for j in range(s.num_instances):
                masks.append(s.masks[j])
                owners.append((i, j))
        if not masks:
            raise ValueError("mask corpus is empty")
        return cls(torch.stack(masks), owners)


def crop_attach_baseline(sample: Sample, target: Sequence[Sample], corpus: Optional[MaskCorpus] = None) -> Tensor:
    """Paste each instance's nearest target-domain instance onto the image.

    For every mask, the nearest target mask (L2) is found and the target
    image's pixels under that mask are copied onto the original image at the
    same place.  Later instances overwrite earlier ones.
    """
    if not target:
        raise ValueError("target dataset is empty")
    corpus = corpus or MaskCorpus.from_samples(target)
    out = sample.image.clone()
    for j in range(sample.num_instances):
        (idx, _), = nearest_neighbor_masks(sample.masks[j], corpus.masks, 1)
        si, _ = corpus.owners[idx]
        region = corpus.masks[idx].bool().expand_as(out)
        out = torch.where(region, target[si].image, out)
    return out


@dataclass
class EvalReport:
    classification_score: float
    masked_classification_score: float
    background_l1: dict
    n_images: int
    classifier_accuracy: float
    direction: str = ""
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")


def summarize(values: Sequence[Optional[float]]) -> dict:
    present = [v for v in values if v is not None]
    if not present:
        return {"median": None, "p90": None, "n": 0, "absent": len(values)}
    arr = np.asarray(present)
    return {"median": float(np.median(arr)), "p90": float(np.percentile(arr, 90)), "n": len(present),
            "absent": len(values) - len(present)}


@torch.no_grad()
def translate_all(G, samples: Sequence[Sample], batch_size: int) -> List[Tuple[Tensor, Tensor]]:
    """Sequentially translate each sample; masks come back in input order."""
    from .sequential import sequential_translate

    out = []
    for s in samples:
        trace = sequential_translate(G, s.image, s.masks * 2 - 1, batch_size)
        masks = torch.empty_like(trace.masks)
        masks[trace.order] = trace.masks
        out.append((trace.image, masks))
    return out


def evaluate_direction(G, samples: Sequence[Sample], classifier: DomainClassifier, target_domain: str,
                       batch_size: int, translated=None) -> EvalReport:
    """Translate ``samples`` with ``G`` and score them against ``target_domain``."""
    if translated is None:
        translated = translate_all(G, samples, batch_size)
    images = [t[0] for t in translated]
    bg = [background_preservation_error(s.image, s.masks, img, m) for s, (img, m) in zip(samples, translated)]
    return EvalReport(
        classification_score=classification_score(classifier, images, target_domain),
        masked_classification_score=masked_classification_score(classifier, images, [t[1] for t in translated],
                                                                target_domain),
        background_l1=summarize(bg),
        n_images=len(samples),
        classifier_accuracy=classifier.heldout_accuracy,
        direction=f"{samples[0].domain}->{target_domain}" if samples else "",
        # masked scores of these images are computed on a constant gray input
        extra={"empty_mask_union": sum(int(not (t[1] > 0).any()) for t in translated)},
    )
