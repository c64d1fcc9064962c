"""Training loop: alternating G/D updates, schedule, replay pool, checkpoints."""
from __future__ import annotations

import dataclasses
import json
import logging
import random
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch

from .checkpoint import (Checkpoint, CheckpointError, load_checkpoint, load_optimizer_tensors, optimizer_tensors,
                         save_checkpoint)
from .data import Sample, to_network_range, to_unit_range, write_image, write_mask
from .losses import LossWeights, NonFiniteLossError, Pair
from .networks import NetConfig, NetworkBundle, init_networks
from .sequential import sequential_training_step, sequential_translate

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    lr_G: float = 2e-4
    lr_D: float = 1e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    epochs_const: int = 100
    epochs_decay: int = 100
    sample_batch: int = 4
    instance_batch_size: int = 2
    mask_capacity: int = 4
    pool_size: int = 50
    seed: int = 0
    checkpoint_every: int = 10
    sample_dump_every: int = 10
    dump_count: int = 2

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if not (self.lr_G > 0 and self.lr_D > 0):
            raise ValueError("learning rates must be positive")
        if self.epochs_const < 0 or self.epochs_decay < 0 or self.total_epochs < 1:
            raise ValueError("need at least one training epoch")
        for name in ("sample_batch", "instance_batch_size", "mask_capacity", "checkpoint_every", "sample_dump_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.pool_size < 0:
            raise ValueError("pool_size must be >= 0")

    @property
    def total_epochs(self) -> int:
        return self.epochs_const + self.epochs_decay

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def lr_schedule(epoch: int, config: TrainConfig) -> Tuple[float, float]:
    """Constant rates for ``epochs_const`` epochs, then a linear ramp towards zero.

    The ramp reaches zero one epoch past the end, so the last epoch trains
    at ``base / epochs_decay``.
    """
    if not 0 <= epoch < config.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.total_epochs})")
    if epoch < config.epochs_const:
        factor = 1.0
    else:
        factor = (config.total_epochs - epoch) / config.epochs_decay
    return config.lr_G * factor, config.lr_D * factor


class ReplayPool:
    """Bounded history of generated samples shown to a discriminator."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        self.stored: List[Pair] = []

    def __len__(self):
        return len(self.stored)

    def query(self, fake: Pair, rng: random.Random) -> Pair:
        if self.capacity == 0:
            return fake
        if len(self.stored) < self.capacity:
            self.stored.append(fake)
            return fake
        if rng.random() < 0.5:
            return fake
        idx = rng.randrange(self.capacity)
        old = self.stored[idx]
        self.stored[idx] = fake
        return old


def pool_query(pool: ReplayPool, fake: Pair, rng: random.Random) -> Pair:
    return pool.query(fake, rng)


def epoch_pairs(n_x: int, n_y: int, seed: int, epoch: int) -> List[Tuple[int, int]]:
    """Sample index pairs for one epoch of length ``max(n_x, n_y)``.

    Each domain is shuffled; the shorter one is reshuffled and cycled.
    """
    rng = np.random.default_rng([seed, epoch])
    length = max(n_x, n_y)

    def stream(n):
        out = []
        while len(out) < length:
            out.extend(rng.permutation(n).tolist())
        return out[:length]

    return list(zip(stream(n_x), stream(n_y)))


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, checkpoint_path: Optional[Path] = None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


@dataclass
class TrainState:
    bundle: NetworkBundle
    opt_G: torch.optim.Optimizer
    opt_D: torch.optim.Optimizer
    pools: dict
    rng: random.Random
    epoch: int = 0  # completed epochs
    step: int = 0  # completed steps
    epoch_step: int = 0  # completed steps of the unfinished epoch


def new_state(config: TrainConfig, net_config: NetConfig) -> TrainState:
    bundle = init_networks(net_config, config.seed)
    betas = (config.adam_beta1, config.adam_beta2)
    opt_G = torch.optim.Adam(bundle.generator_parameters(), lr=config.lr_G, betas=betas)
    opt_D = torch.optim.Adam(bundle.discriminator_parameters(), lr=config.lr_D, betas=betas)
    pools = {"X": ReplayPool(config.pool_size), "Y": ReplayPool(config.pool_size)}
    return TrainState(bundle, opt_G, opt_D, pools, random.Random(config.seed))


def state_to_checkpoint(state: TrainState, config: TrainConfig, extra: Optional[dict] = None) -> Checkpoint:
    tensors = OrderedDict()
    for name, t in state.bundle.state_dict().items():
        tensors[f"net/{name}"] = t
    tensors.update(optimizer_tensors("opt_G", state.opt_G))
    tensors.update(optimizer_tensors("opt_D", state.opt_D))
    for domain, pool in state.pools.items():
        for i, (img, masks) in enumerate(pool.stored):
            tensors[f"pool_{domain}/{i:04d}/image"] = img
            tensors[f"pool_{domain}/{i:04d}/masks"] = masks
    rng_state = state.rng.getstate()
    header = {
        "net_config": state.bundle.config.to_dict(),
        "train_config": config.to_dict(),
        "epoch": state.epoch,
        "step": state.step,
        "epoch_step": state.epoch_step,
        "seed": config.seed,
        "rng_state": [rng_state[0], list(rng_state[1]), rng_state[2]],
        "lr": {"G": state.opt_G.param_groups[0]["lr"], "D": state.opt_D.param_groups[0]["lr"]},
    }
    for key, value in (extra or {}).items():
        header.setdefault(key, value)
    return Checkpoint(header, tensors)


def configs_from_checkpoint(ckpt: Checkpoint) -> Tuple[TrainConfig, NetConfig]:
    try:
        return TrainConfig(**ckpt.header["train_config"]), NetConfig(**ckpt.header["net_config"])
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"checkpoint header is missing configuration: {exc}") from exc


def bundle_from_checkpoint(ckpt: Checkpoint) -> NetworkBundle:
    _, net_config = configs_from_checkpoint(ckpt)
    bundle = NetworkBundle(net_config)
    net = {k[4:]: v for k, v in ckpt.tensors.items() if k.startswith("net/")}
    try:
        bundle.load_state_dict(net)
    except RuntimeError as exc:
        raise CheckpointError(f"checkpoint parameters do not fit the network: {exc}") from exc
    return bundle


def state_from_checkpoint(ckpt: Checkpoint) -> Tuple[TrainState, TrainConfig]:
    config, net_config = configs_from_checkpoint(ckpt)
    state = new_state(config, net_config)
    state.bundle.load_state_dict(bundle_from_checkpoint(ckpt).state_dict())
    load_optimizer_tensors("opt_G", state.opt_G, ckpt.tensors)
    load_optimizer_tensors("opt_D", state.opt_D, ckpt.tensors)
    for domain, pool in state.pools.items():
        prefix = f"pool_{domain}/"
        keys = sorted({k.split("/")[1] for k in ckpt.tensors if k.startswith(prefix)})
        pool.stored = [(ckpt.tensors[f"{prefix}{i}/image"], ckpt.tensors[f"{prefix}{i}/masks"]) for i in keys]
    v, internal, gauss = ckpt.header["rng_state"]
    state.rng.setstate((v, tuple(internal), gauss))
    state.epoch = ckpt.header["epoch"]
    state.step = ckpt.header["step"]
    state.epoch_step = ckpt.header.get("epoch_step", 0)
    return state, config


def dump_samples(bundle: NetworkBundle, samples: Sequence[Sample], out_dir: Path, batch_size: int):
    """Write ``{id}_{orig|trans|mask_orig|mask_trans}.png`` for each sample."""
    with torch.no_grad():
        for s in samples:
            G = bundle.G_XY if s.domain == "X" else bundle.G_YX
            trace = sequential_translate(G, s.image, to_network_range(s.masks), batch_size)
            write_image(s.image, out_dir / f"{s.id}_orig.png")
            write_image(trace.image, out_dir / f"{s.id}_trans.png")
            write_mask(s.masks.amax(0), out_dir / f"{s.id}_mask_orig.png")
            write_mask(to_unit_range(trace.masks).amax(0), out_dir / f"{s.id}_mask_trans.png")


def _apply_update(state: TrainState, pending: int):
    if pending > 1:
        for p in state.bundle.parameters():
            if p.grad is not None:
                p.grad.div_(pending)
    state.opt_G.step()
    state.opt_D.step()
    state.opt_G.zero_grad(set_to_none=True)
    state.opt_D.zero_grad(set_to_none=True)


def train(config: TrainConfig, net_config: NetConfig, dataset_X: Sequence[Sample], dataset_Y: Sequence[Sample],
          out_dir, resume: Optional[str] = None, max_steps: Optional[int] = None,
          extra_header: Optional[dict] = None) -> Checkpoint:
    """Train both directions; returns the final checkpoint (also saved as ``final.ckpt``).

    Writes ``losses.jsonl`` (one record per step), ``epoch_{k}.ckpt`` every
    ``checkpoint_every`` epochs and sample dumps under ``epoch_{k}/``.  With a
    single worker the run is fully determined by ``config.seed``.
    ``extra_header`` entries are stored in every checkpoint header.
    """
    if len(dataset_X) == 0 or len(dataset_Y) == 0:
        raise ValueError("both datasets must be non-empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    extra = dict(extra_header or {})
    if resume is not None:
        ckpt = load_checkpoint(resume)
        state, config = state_from_checkpoint(ckpt)
        net_config = state.bundle.config
        if "run" in ckpt.header:
            extra.setdefault("run", ckpt.header["run"])
    else:
        state = new_state(config, net_config)
    (out_dir / "config.json").write_text(json.dumps(
        {"train": config.to_dict(), "net": net_config.to_dict()}, indent=1, sort_keys=True) + "\n")

    log_path = out_dir / "losses.jsonl"
    if resume is not None and log_path.exists():
        kept = [ln for ln in log_path.read_text().splitlines() if json.loads(ln)["step"] <= state.step]
        log_path.write_text("".join(ln + "\n" for ln in kept))
    elif resume is None:
        log_path.write_text("")

    def fake_filter(domain, fake):
        return state.pools[domain].query(fake, state.rng)

    dump_set = list(dataset_X[:config.dump_count]) + list(dataset_Y[:config.dump_count])
    bs = config.instance_batch_size
    state.bundle.train()
    with open(log_path, "a") as log_file:
        for epoch in range(state.epoch, config.total_epochs):
            lr_G, lr_D = lr_schedule(epoch, config)
            for g in state.opt_G.param_groups:
                g["lr"] = lr_G
            for g in state.opt_D.param_groups:
                g["lr"] = lr_D
            pairs = epoch_pairs(len(dataset_X), len(dataset_Y), config.seed, epoch)
            pending = 0
            t0 = time.time()
            stop = False
            for i, (ix, iy) in enumerate(pairs):
                if i < state.epoch_step:  # done before the checkpoint this run resumed from
                    continue
                try:
                    out = sequential_training_step(state.bundle, dataset_X[ix], dataset_Y[iy], config.weights, bs,
                                                   fake_filter=fake_filter)
                except NonFiniteLossError as exc:
                    state.opt_G.zero_grad(set_to_none=True)
                    state.opt_D.zero_grad(set_to_none=True)
                    path = save_checkpoint(state_to_checkpoint(state, config, extra), out_dir / "abort.ckpt")
                    raise TrainingAborted(f"epoch {epoch}, step {state.step + 1}: {exc}", path) from exc
                state.step += 1
                state.epoch_step = i + 1
                pending += 1
                stop = max_steps is not None and state.step >= max_steps
                if pending == config.sample_batch or i == len(pairs) - 1 or stop:
                    _apply_update(state, pending)
                    pending = 0
                log_file.write(out.report.to_json(state.step) + "\n")
                if stop:
                    break
            log_file.flush()
            if stop and i < len(pairs) - 1:
                break
            state.epoch = epoch + 1
            state.epoch_step = 0
            r = out.report
            log.info("epoch %d/%d  %.1fs  G %.3f  D %.3f  cyc %.3f  idt %.3f  ctx %.3f", state.epoch,
                     config.total_epochs, time.time() - t0, r.gan_G, r.gan_D, r.cyc, r.idt, r.ctx)
            if state.epoch % config.checkpoint_every == 0:
                save_checkpoint(state_to_checkpoint(state, config, extra), out_dir / f"epoch_{state.epoch}.ckpt")
            if state.epoch % config.sample_dump_every == 0 and dump_set:
                dump_samples(state.bundle, dump_set, out_dir / f"epoch_{state.epoch}", bs)
            if stop:
                break

    final = state_to_checkpoint(state, config, extra)
    save_checkpoint(final, out_dir / "final.ckpt")
    return final
