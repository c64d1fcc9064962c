import json
import random
import struct
from dataclasses import replace

import pytest
import torch

from instrans.checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from instrans.losses import LossWeights
from instrans.networks import NetConfig, init_networks
from instrans.sequential import frozen, sequential_training_step
from instrans.synthetic import SyntheticSpec, synthesize
from instrans.trainer import (ReplayPool, TrainConfig, TrainingAborted, bundle_from_checkpoint, epoch_pairs,
                              lr_schedule, pool_query, state_from_checkpoint, state_to_checkpoint, train)

NET = NetConfig(base_channels=4, n_res_blocks=1, discriminator_layers=4, mask_capacity=3)


@pytest.fixture(scope="module")
def tiny_data():
    spec = SyntheticSpec(num_samples=8, instances_per_image=(1, 3), size_range=(5, 9), resolution=(16, 16),
                         seed=11)
    return synthesize(spec, "X"), synthesize(spec, "Y")


def _config(**kw):
    base = dict(epochs_const=1, epochs_decay=1, sample_batch=2, instance_batch_size=2, mask_capacity=3,
                pool_size=4, seed=0, checkpoint_every=1, sample_dump_every=2, dump_count=1)
    base.update(kw)
    return TrainConfig(**base)


def _log(path):
    return [json.loads(line) for line in path.read_text().splitlines()]


# schedule

def test_lr_schedule_examples():
    cfg = TrainConfig()
    assert lr_schedule(0, cfg) == (2e-4, 1e-4)
    g, d = lr_schedule(cfg.epochs_const + cfg.epochs_decay // 2, cfg)
    assert g == pytest.approx(1e-4) and d == pytest.approx(5e-5)
    g, d = lr_schedule(cfg.total_epochs - 1, cfg)
    assert g == pytest.approx(2e-4 / cfg.epochs_decay) and d == pytest.approx(1e-4 / cfg.epochs_decay)
    for bad in (-1, cfg.total_epochs):
        with pytest.raises(ValueError):
            lr_schedule(bad, cfg)


@pytest.mark.parametrize("const,decay", [(3, 4), (0, 5), (5, 1), (100, 100)])
def test_lr_schedule_monotone_positive(const, decay):
    cfg = TrainConfig(epochs_const=const, epochs_decay=decay)
    rates = [lr_schedule(e, cfg)[0] for e in range(cfg.total_epochs)]
    assert all(a >= b for a, b in zip(rates, rates[1:]))
    assert min(rates) > 0


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr_G=0)
    with pytest.raises(ValueError):
        TrainConfig(epochs_const=0, epochs_decay=0)
    with pytest.raises(ValueError):
        TrainConfig(weights=LossWeights(lambda_cyc=-1))
    assert TrainConfig(weights={"lambda_cyc": 1, "lambda_idt": 2, "lambda_ctx": 3}).weights.lambda_idt == 2


# replay pool

class _Forced:
    def __init__(self, r, idx=0):
        self.r, self.idx = r, idx

    def random(self):
        return self.r

    def randrange(self, n):
        return self.idx


def _fake(v):
    return torch.full((3, 2, 2), float(v)), torch.zeros(1, 1, 2, 2)


def test_pool_fills_first():
    pool = ReplayPool(1)
    f = _fake(1)
    assert pool_query(pool, f, random.Random(0)) is f
    assert len(pool) == 1


def test_pool_disabled():
    pool = ReplayPool(0)
    f = _fake(1)
    for _ in range(3):
        assert pool.query(f, random.Random(0)) is f
    assert len(pool) == 0


def test_pool_swap_returns_stored():
    pool = ReplayPool(2)
    a, b, c = _fake(1), _fake(2), _fake(3)
    pool.query(a, _Forced(0.0))
    pool.query(b, _Forced(0.0))
    out = pool.query(c, _Forced(0.9, idx=1))
    assert out is b and pool.stored[1] is c and len(pool) == 2
    assert pool.query(_fake(4), _Forced(0.1)) is not a


def test_pool_never_exceeds_capacity():
    pool, rng = ReplayPool(3), random.Random(1)
    for i in range(20):
        pool.query(_fake(i), rng)
        assert len(pool) <= 3


# pairing

@pytest.mark.parametrize("nx,ny", [(5, 5), (3, 7), (8, 2)])
def test_epoch_pairs_cover_both(nx, ny):
    pairs = epoch_pairs(nx, ny, seed=0, epoch=3)
    assert len(pairs) == max(nx, ny)
    assert {i for i, _ in pairs} == set(range(nx))
    assert {j for _, j in pairs} == set(range(ny))
    assert pairs == epoch_pairs(nx, ny, seed=0, epoch=3)
    assert pairs != epoch_pairs(nx, ny, seed=0, epoch=4) or max(nx, ny) < 3


# training loop

def test_bookkeeping(tmp_path, tiny_data):
    xs, ys = tiny_data
    train(_config(), NET, xs, ys, tmp_path)
    records = _log(tmp_path / "losses.jsonl")
    assert [r["step"] for r in records] == list(range(1, 17))
    assert set(records[0]) == {"step", "gan_G", "gan_D", "cyc", "idt", "ctx", "total"}
    assert (tmp_path / "epoch_1.ckpt").exists() and (tmp_path / "epoch_2.ckpt").exists()
    assert (tmp_path / "final.ckpt").exists()
    dumps = sorted(p.name for p in (tmp_path / "epoch_2").iterdir())
    assert dumps == sorted(f"{sid}_{kind}.png" for sid in ("X_00000", "Y_00000")
                           for kind in ("orig", "trans", "mask_orig", "mask_trans"))
    assert not (tmp_path / "epoch_1").exists()


def test_same_seed_same_log(tmp_path, tiny_data):
    xs, ys = tiny_data
    train(_config(), NET, xs, ys, tmp_path / "a", max_steps=6)
    train(_config(), NET, xs, ys, tmp_path / "b", max_steps=6)
    assert (tmp_path / "a" / "losses.jsonl").read_bytes() == (tmp_path / "b" / "losses.jsonl").read_bytes()
    assert len(_log(tmp_path / "a" / "losses.jsonl")) == 6


def test_pool_bypassed_when_zero(tmp_path, tiny_data):
    xs, ys = tiny_data
    ckpt = train(_config(pool_size=0), NET, xs, ys, tmp_path, max_steps=3)
    assert not any(k.startswith("pool_") for k in ckpt.tensors)


def test_abort_on_non_finite(tmp_path, tiny_data):
    xs, ys = tiny_data
    bad = [replace(s, image=torch.full_like(s.image, float("nan"))) for s in xs]
    with pytest.raises(TrainingAborted) as info:
        train(_config(), NET, bad, ys, tmp_path)
    assert info.value.checkpoint_path == tmp_path / "abort.ckpt"
    assert load_checkpoint(tmp_path / "abort.ckpt").header["step"] == 0


def test_empty_dataset_rejected(tmp_path, tiny_data):
    with pytest.raises(ValueError):
        train(_config(), NET, [], tiny_data[1], tmp_path)


def test_zero_weights_and_satisfied_discriminator_give_zero_generator_gradient(tiny_data):
    net = replace(NET, use_spectral_norm_D=False)
    bundle = init_networks(net, 0)
    for D in bundle.discriminators():
        last = D.g_x.model[-1]
        torch.nn.init.zeros_(last.weight)
        torch.nn.init.ones_(last.bias)
    xs, ys = tiny_data
    sequential_training_step(bundle, xs[0], ys[0], LossWeights(0, 0, 0), 2, discriminators=False)
    for p in bundle.generator_parameters():
        assert p.grad is None or torch.count_nonzero(p.grad) == 0


# checkpoints

def test_checkpoint_roundtrip_bytes(tmp_path, tiny_data):
    xs, ys = tiny_data
    ckpt = train(_config(), NET, xs, ys, tmp_path / "run", max_steps=5)
    first = ckpt.to_bytes()
    save_checkpoint(ckpt, tmp_path / "a.ckpt")
    again = load_checkpoint(tmp_path / "a.ckpt")
    save_checkpoint(again, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes() == first
    state, config = state_from_checkpoint(again)
    assert state_to_checkpoint(state, config).to_bytes() == first


def test_checkpoint_header_layout(tmp_path, tiny_data):
    xs, ys = tiny_data
    data = train(_config(), NET, xs, ys, tmp_path, max_steps=2).to_bytes()
    assert data[:4] == b"IGAN"
    version, hlen = struct.unpack("<II", data[4:12])
    header = json.loads(data[12:12 + hlen])
    assert version == 1
    assert {"net_config", "train_config", "epoch", "step", "seed", "tensors"} <= set(header)
    entry = header["tensors"][0]
    assert {"name", "shape", "dtype", "offset", "nbytes", "crc32"} <= set(entry)


def test_checkpoint_errors(tmp_path):
    ckpt = Checkpoint({"k": 1}, {"w": torch.arange(6, dtype=torch.float32).reshape(2, 3)})
    data = ckpt.to_bytes()
    assert torch.equal(Checkpoint.from_bytes(data).tensors["w"], ckpt.tensors["w"])
    for broken, msg in [(data[:-3], "truncated"), (b"XXXX" + data[4:], "magic"),
                        (data[:4] + struct.pack("<I", 99) + data[8:], "version"),
                        (data[:-1] + bytes([data[-1] ^ 1]), "checksum"), (data + b"\0", "trailing")]:
        with pytest.raises(CheckpointError, match=msg):
            Checkpoint.from_bytes(broken)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.ckpt")


def test_resume_matches_uninterrupted(tmp_path, tiny_data):
    xs, ys = tiny_data
    cfg = _config(epochs_const=1, epochs_decay=2)
    train(cfg, NET, xs, ys, tmp_path / "full")
    train(cfg, NET, xs, ys, tmp_path / "part", max_steps=8)
    full = _log(tmp_path / "full" / "losses.jsonl")
    train(cfg, NET, xs, ys, tmp_path / "part", resume=tmp_path / "part" / "epoch_1.ckpt")
    resumed = _log(tmp_path / "part" / "losses.jsonl")
    assert [r["step"] for r in resumed] == [r["step"] for r in full]
    for a, b in zip(resumed, full):
        for k in ("gan_G", "gan_D", "cyc", "idt", "ctx", "total"):
            assert a[k] == pytest.approx(b[k], rel=1e-6, abs=1e-12)


def test_resume_mid_epoch(tmp_path, tiny_data):
    xs, ys = tiny_data
    cfg = _config(epochs_const=1, epochs_decay=1)
    train(cfg, NET, xs, ys, tmp_path / "full")
    ckpt = train(cfg, NET, xs, ys, tmp_path / "part", max_steps=6)  # a sample_batch boundary inside epoch 1
    assert (ckpt.header["epoch"], ckpt.header["epoch_step"]) == (0, 6)
    train(cfg, NET, xs, ys, tmp_path / "part", resume=tmp_path / "part" / "final.ckpt")
    full = _log(tmp_path / "full" / "losses.jsonl")
    resumed = _log(tmp_path / "part" / "losses.jsonl")
    assert [r["step"] for r in resumed] == list(range(1, 17))
    for a, b in zip(resumed, full):
        assert a["total"] == pytest.approx(b["total"], rel=1e-6)


def test_bundle_from_checkpoint_restores_weights(tmp_path, tiny_data):
    xs, ys = tiny_data
    ckpt = train(_config(), NET, xs, ys, tmp_path, max_steps=3)
    bundle = bundle_from_checkpoint(ckpt)
    for name, t in bundle.state_dict().items():
        assert torch.equal(t, ckpt.tensors[f"net/{name}"])
    bad = Checkpoint(dict(ckpt.header, net_config=dict(ckpt.header["net_config"], base_channels=8)), ckpt.tensors)
    with pytest.raises(CheckpointError):
        bundle_from_checkpoint(bad)
