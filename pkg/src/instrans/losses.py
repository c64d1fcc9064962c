"""Training objectives.

Every loss reduces by the mean over its elements (patches, pixels, valid
mask elements).  Image/mask pairs are ``(image [3,H,W], masks [N,1,H,W])``
tuples with masks in network range.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from typing import Tuple

import torch
from torch import Tensor

Pair = Tuple[Tensor, Tensor]


class NonFiniteLossError(FloatingPointError):
    def __init__(self, term: str, step=None, value=None):
        where = f" at mini-batch step {step}" if step is not None else ""
        super().__init__(f"non-finite loss term {term!r}{where}: {value}")
        self.term = term
        self.step = step


@dataclass
class LossWeights:
    lambda_cyc: float = 10.0
    lambda_idt: float = 10.0
    lambda_ctx: float = 10.0

    def __post_init__(self):
        for name, value in dataclasses.asdict(self).items():
            if not value >= 0:
                raise ValueError(f"{name} must be >= 0, got {value}")


@dataclass
class LossReport:
    gan_G: float
    gan_D: float
    cyc: float
    idt: float
    ctx: float
    total: float

    def to_json(self, step: int) -> str:
        return json.dumps({"step": step, **dataclasses.asdict(self)})


def lsgan_d_loss(real_score: Tensor, fake_score: Tensor) -> Tensor:
    return ((real_score - 1) ** 2).mean() + (fake_score ** 2).mean()


def lsgan_g_loss(fake_score: Tensor) -> Tensor:
    return ((fake_score - 1) ** 2).mean()


def pair_l1(a: Pair, b: Pair) -> Tensor:
    """Mean |image difference| plus mean |mask difference| over the mask slots."""
    img_a, masks_a = a
    img_b, masks_b = b
    if masks_a.shape[0] != masks_b.shape[0]:
        raise ValueError(f"slot count mismatch: {masks_a.shape[0]} vs {masks_b.shape[0]}")
    loss = (img_a - img_b).abs().mean()
    if masks_a.shape[0]:
        loss = loss + (masks_a - masks_b).abs().mean()
    return loss


def cycle_loss(original: Pair, reconstructed: Pair, original2: Pair, reconstructed2: Pair) -> Tensor:
    return pair_l1(original, reconstructed) + pair_l1(original2, reconstructed2)


def identity_loss(y_pair: Pair, gxy_of_y: Pair, x_pair: Pair, gyx_of_x: Pair) -> Tensor:
    return pair_l1(gxy_of_y, y_pair) + pair_l1(gyx_of_x, x_pair)


def context_weight(masks_a: Tensor, masks_b: Tensor) -> Tensor:
    """Weight ``[1, H, W]`` that is 1 where a pixel is background in both sets.

    Inputs are ``[N, 1, H, W]`` masks in [0, 1] (either set may be empty).
    The weight is ``1 - min(sum of all masks, 1)``; for binary masks it is 1
    exactly outside the union of both sets and 0 inside it.
    """
    if masks_a.shape[2:] != masks_b.shape[2:]:
        raise ValueError(f"mask sets differ in size: {tuple(masks_a.shape[2:])} vs {tuple(masks_b.shape[2:])}")
    total = masks_a.sum(dim=0) + masks_b.sum(dim=0)
    return 1.0 - total.clamp(0.0, 1.0)


def context_loss(x: Tensor, y_prime: Tensor, weight: Tensor) -> Tensor:
    """Mean of ``weight * |x - y'|`` over image elements (one direction)."""
    return (weight * (x - y_prime).abs()).mean()


def check_finite(name: str, value, step=None):
    v = float(value.detach()) if torch.is_tensor(value) else float(value)
    if not math.isfinite(v):
        raise NonFiniteLossError(name, step, v)
    return value


def total_loss(gan, cyc, idt, ctx, weights: LossWeights):
    """``gan + l_cyc*cyc + l_idt*idt + l_ctx*ctx``; raises on non-finite inputs."""
    for name, v in (("gan", gan), ("cyc", cyc), ("idt", idt), ("ctx", ctx)):
        check_finite(name, v)
    return gan + weights.lambda_cyc * cyc + weights.lambda_idt * idt + weights.lambda_ctx * ctx
