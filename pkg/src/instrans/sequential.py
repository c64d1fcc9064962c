"""Sequential mini-batch translation and the matching detached training step.

Instances are sorted by decreasing area and split into mini-batches
``a_1..a_M``.  Step ``m`` translates ``(x_m, a_m)`` where ``x_1 = x`` and
``x_m = y'_{m-1}``; the translated masks are concatenated in mini-batch order.

In training, each step is back-propagated on its own: ``y'_{m-1}`` and the
masks translated at earlier steps enter step ``m`` as constants, so the
autograd graph never spans more than one mini-batch.  Content losses
(cycle, identity, context) see only the current mini-batch; the adversarial
loss sees the current image with every mask translated so far.  Per-step
losses are averaged over ``m``.
"""
from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import torch
from torch import Tensor

from .data import Sample, instance_order, partition_minibatches, to_network_range, to_unit_range
from .losses import (LossReport, LossWeights, Pair, check_finite, context_loss, context_weight,
                     lsgan_g_loss, pair_l1)
from .networks import NetworkBundle, SetDiscriminator, SetGenerator


@dataclass
class SequentialStep:
    x: Tensor  # input image of this step
    a: Tensor  # input mini-batch of masks
    y: Tensor  # translated image
    b: Tensor  # translated mini-batch of masks


@dataclass
class SequentialTrace:
    steps: List[SequentialStep]
    image: Tensor  # y'_M
    masks: Tensor  # b'_{1:M}, canonical order
    order: Tensor  # input index of each canonical slot

    @property
    def M(self) -> int:
        return len(self.steps)


def sequential_translate(G: SetGenerator, image: Tensor, masks: Tensor, batch_size: int) -> SequentialTrace:
    """Translate ``masks`` ([N,1,H,W], network range) in mini-batches of ``batch_size``.

    Masks are put into canonical (decreasing area) order first; ``trace.order``
    maps output slots back to input slots.
    """
    if masks.shape[0] == 0:
        raise ValueError("sequential translation needs at least one instance mask")
    order = instance_order(masks)
    chunks = partition_minibatches(masks[order], batch_size)
    steps = []
    x_m = image
    for a_m in chunks:
        y_m, b_m = G(x_m, a_m)
        steps.append(SequentialStep(x_m, a_m, y_m, b_m))
        x_m = y_m.detach().clamp(-1.0, 1.0)
    aggregated = torch.cat([s.b for s in steps])
    return SequentialTrace(steps, steps[-1].y, aggregated, order)


@contextmanager
def frozen(*modules: torch.nn.Module):
    """Disable gradients for the parameters of ``modules`` inside the block."""
    params = [p for m in modules for p in m.parameters()]
    saved = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad_(False)
    try:
        yield
    finally:
        for p, flag in zip(params, saved):
            p.requires_grad_(flag)


@dataclass
class DirectionResult:
    gan: float = 0.0
    cyc: float = 0.0
    idt: float = 0.0
    ctx: float = 0.0
    total: float = 0.0
    fakes: List[Pair] = field(default_factory=list)


def generator_direction(G: SetGenerator, G_back: SetGenerator, D: SetDiscriminator, image: Tensor, masks: Tensor,
                        batch_size: int, weights: LossWeights, backward: bool = True) -> DirectionResult:
    """Run one translation direction sequentially and back-propagate each step.

    ``masks`` are network-range and already canonically ordered.  Gradients
    accumulate into ``.grad`` of every parameter that requires them; the
    discriminator should be frozen by the caller.  Returned scalars are
    means over the mini-batch steps; ``fakes`` holds one detached aggregate
    ``(y'_m, b'_{1:m})`` per step.
    """
    chunks = partition_minibatches(masks, batch_size)
    if not chunks:
        raise ValueError("training needs at least one instance mask per sample")
    M = len(chunks)
    out = DirectionResult()
    done: List[Tensor] = []
    x_m = image
    for m, a_m in enumerate(chunks, start=1):
        y_m, b_m = G(x_m, a_m)
        aggregate = torch.cat(done + [b_m])
        gan = lsgan_g_loss(D(y_m, aggregate))
        cyc = pair_l1(G_back(y_m, b_m), (x_m, a_m))
        idt = pair_l1(G_back(x_m, a_m), (x_m, a_m))
        w = context_weight(to_unit_range(a_m), to_unit_range(b_m))
        ctx = context_loss(x_m, y_m, w)
        for name, term in (("gan_G", gan), ("cyc", cyc), ("idt", idt), ("ctx", ctx)):
            check_finite(name, term, step=m)
        loss = gan + weights.lambda_cyc * cyc + weights.lambda_idt * idt + weights.lambda_ctx * ctx
        if backward:
            (loss / M).backward()
        out.gan += gan.item() / M
        out.cyc += cyc.item() / M
        out.idt += idt.item() / M
        out.ctx += ctx.item() / M
        out.total += loss.item() / M
        out.fakes.append((y_m.detach(), aggregate.detach()))
        done.append(b_m.detach())
        x_m = y_m.detach().clamp(-1.0, 1.0)
    return out


def discriminator_loss(D: SetDiscriminator, real: Pair, fakes: List[Pair]) -> Tensor:
    """``(D(real) - 1)^2`` plus the mean over ``fakes`` of ``D(fake)^2``."""
    real_term = ((D(*real) - 1) ** 2).mean()
    fake_term = sum((D(*f) ** 2).mean() for f in fakes) / len(fakes)
    return real_term + fake_term


FakeFilter = Callable[[str, Pair], Pair]


@dataclass
class StepOutput:
    report: LossReport
    fakes_X: List[Pair]  # translated into domain X (by G_YX)
    fakes_Y: List[Pair]  # translated into domain Y (by G_XY)


def prepare(sample: Sample) -> Pair:
    """Network-range masks in canonical order."""
    masks = sample.masks[instance_order(sample.masks)]
    return sample.image, to_network_range(masks)


def sequential_training_step(bundle: NetworkBundle, sample_x: Sample, sample_y: Sample, weights: LossWeights,
                             batch_size: int, fake_filter: Optional[FakeFilter] = None,
                             discriminators: bool = True) -> StepOutput:
    """One training step for a pair of samples; gradients accumulate in ``.grad``.

    The generator pass runs with both discriminators frozen.  The
    discriminator pass then scores real samples with their full mask sets
    against the detached per-step fakes, optionally routed through
    ``fake_filter(domain, fake)`` (e.g. a replay pool).
    """
    if sample_x.is_empty or sample_y.is_empty:
        raise ValueError("both samples need at least one instance")
    real_x = prepare(sample_x)
    real_y = prepare(sample_y)
    with frozen(bundle.D_X, bundle.D_Y):
        fwd = generator_direction(bundle.G_XY, bundle.G_YX, bundle.D_Y, *real_x, batch_size, weights)
        bwd = generator_direction(bundle.G_YX, bundle.G_XY, bundle.D_X, *real_y, batch_size, weights)

    fakes_y, fakes_x = fwd.fakes, bwd.fakes
    gan_D = 0.0
    if discriminators:
        if fake_filter is not None:
            fakes_y = [fake_filter("Y", f) for f in fakes_y]
            fakes_x = [fake_filter("X", f) for f in fakes_x]
        with frozen(bundle.G_XY, bundle.G_YX):
            d_loss = discriminator_loss(bundle.D_X, real_x, fakes_x) + discriminator_loss(bundle.D_Y, real_y, fakes_y)
            check_finite("gan_D", d_loss)
            d_loss.backward()
        gan_D = d_loss.item()

    report = LossReport(
        gan_G=fwd.gan + bwd.gan,
        gan_D=gan_D,
        cyc=fwd.cyc + bwd.cyc,
        idt=fwd.idt + bwd.idt,
        ctx=fwd.ctx + bwd.ctx,
        total=fwd.total + bwd.total,
    )
    return StepOutput(report, fakes_x, fakes_y)


def one_step_objective(bundle: NetworkBundle, pair_x: Pair, pair_y: Pair, weights: LossWeights) -> Tuple[Tensor, Dict[str, Tensor]]:
    """The generator-side objective with every instance translated at once.

    Returns the weighted total and its components as differentiable tensors;
    nothing is frozen or detached.
    """
    G_XY, G_YX, D_X, D_Y = bundle.G_XY, bundle.G_YX, bundle.D_X, bundle.D_Y
    x, a = pair_x
    y, b = pair_y
    y_fake, b_fake = G_XY(x, a)
    x_fake, a_fake = G_YX(y, b)
    gan = lsgan_g_loss(D_Y(y_fake, b_fake)) + lsgan_g_loss(D_X(x_fake, a_fake))
    cyc = pair_l1(G_YX(y_fake, b_fake), pair_x) + pair_l1(G_XY(x_fake, a_fake), pair_y)
    idt = pair_l1(G_XY(y, b), pair_y) + pair_l1(G_YX(x, a), pair_x)
    ctx = (context_loss(x, y_fake, context_weight(to_unit_range(a), to_unit_range(b_fake)))
           + context_loss(y, x_fake, context_weight(to_unit_range(b), to_unit_range(a_fake))))
    total = gan + weights.lambda_cyc * cyc + weights.lambda_idt * idt + weights.lambda_ctx * ctx
    return total, {"gan": gan, "cyc": cyc, "idt": idt, "ctx": ctx}
