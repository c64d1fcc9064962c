"""The eight acceptance criteria, each at its stated tolerance.

Every test prints one ``[acceptance k] ... PASS|FAIL`` line (also repeated
in the terminal summary).  Criterion 7 trains two desk-scale models per seed
and takes over an hour on a single CPU core; set ``INSTRANS_E2E_DIR`` to keep
its run directories.
"""
import copy
import json
import os
import random
import time
from pathlib import Path

import pytest
import torch

from conftest import ACCEPTANCE_LINES, distinct_area_masks, random_masks, random_sample
from instrans.checkpoint import load_checkpoint, save_checkpoint
from instrans.config import RunConfig
from instrans.data import instance_order, pad_mask_set, to_network_range
from instrans.experiment import run_desk_experiment, synthetic_splits
from instrans.evaluation import train_domain_classifier
from instrans.losses import LossWeights, context_weight
from instrans.networks import NetConfig, init_networks
from instrans.sequential import (frozen, generator_direction, one_step_objective, prepare, sequential_training_step,
                                 sequential_translate)
from instrans.synthetic import SyntheticSpec, synthesize
from instrans.trainer import state_from_checkpoint, state_to_checkpoint, train
from oracles import joint_objective, rel_err, step_objective

DESK = RunConfig()


def record(capsys, k, name, passed, detail, seconds):
    line = f"[acceptance {k}] {name}: {'PASS' if passed else 'FAIL'} ({detail}; {seconds:.1f}s)"
    ACCEPTANCE_LINES.append(line)
    with capsys.disabled():
        print("\n" + line)


def test_1_permutation_suite(capsys):
    t0 = time.time()
    bundle = init_networks(DESK.net_config(), seed=0).eval()
    g = torch.Generator().manual_seed(1)
    rng = random.Random(1)
    cap = DESK.mask_capacity
    worst_img = worst_mask = worst_d = 0.0
    with torch.no_grad():
        for i in range(200):
            n = rng.randint(1, cap)
            image = torch.rand(3, 64, 64, generator=g) * 2 - 1
            masks, valid = pad_mask_set(to_network_range(random_masks(n, 64, 64, g)), cap)
            masks[~valid] = -1.0
            perm = torch.tensor(rng.sample(range(cap), cap))
            G = bundle.G_XY if i % 2 == 0 else bundle.G_YX
            D = bundle.D_X if i % 2 == 0 else bundle.D_Y
            img_a, m_a = G(image, masks, valid)
            img_b, m_b = G(image, masks[perm], valid[perm])
            worst_img = max(worst_img, (img_a - img_b).abs().max().item())
            worst_mask = max(worst_mask, (m_a[perm] - m_b).abs().max().item())
            worst_d = max(worst_d, (D(image, masks, valid) - D(image, masks[perm], valid[perm])).abs().max().item())
    elapsed = time.time() - t0
    passed = max(worst_img, worst_mask, worst_d) <= 1e-5 and elapsed < 60
    record(capsys, 1, "permutation suite", passed,
           f"max diff image {worst_img:.2e}, masks {worst_mask:.2e}, D {worst_d:.2e}", elapsed)
    assert passed


def test_2_context_weight_oracle(capsys):
    t0 = time.time()
    g = torch.Generator().manual_seed(2)
    rng = random.Random(2)
    mismatches = 0
    for _ in range(500):
        na, nb = rng.randint(0, 4), rng.randint(0, 4)
        a = (torch.rand(na, 1, 8, 8, generator=g) < rng.random()).float()
        b = (torch.rand(nb, 1, 8, 8, generator=g) < rng.random()).float()
        w = context_weight(a, b)
        al, bl = a.tolist(), b.tolist()
        for i in range(8):
            for j in range(8):
                background = all(m[0][i][j] == 0 for m in al) and all(m[0][i][j] == 0 for m in bl)
                if w[0, i, j].item() != (1.0 if background else 0.0):
                    mismatches += 1
    elapsed = time.time() - t0
    passed = mismatches == 0 and elapsed < 10
    record(capsys, 2, "context-weight oracle", passed, f"{mismatches} mismatching pixels over 500 sets", elapsed)
    assert passed


def test_3_gradient_check(capsys):
    t0 = time.time()
    # 16x16 inputs leave no room for three stride-2 extractor layers, so the check uses two
    cfg = NetConfig(base_channels=4, n_res_blocks=1, discriminator_layers=4, mask_capacity=4)
    bundle = init_networks(cfg, seed=0, dtype=torch.float64).eval()  # eval: spectral-norm vectors stay fixed
    g = torch.Generator().manual_seed(3)
    sx = random_sample(2, 16, 16, g, "X", "x", torch.float64)
    sy = random_sample(2, 16, 16, g, "Y", "y", torch.float64)
    px, py = prepare(sx), prepare(sy)
    weights = LossWeights()

    def objective():
        return one_step_objective(bundle, px, py, weights)[0]

    params = [p for p in bundle.parameters() if p.requires_grad]
    bundle.zero_grad()
    objective().backward()
    analytic = [p.grad.detach().clone() for p in params]

    rng = random.Random(3)
    sizes = [p.numel() for p in params]
    coords = []
    for _ in range(200):
        k = rng.choices(range(len(params)), weights=sizes)[0]
        coords.append((k, rng.randrange(sizes[k])))
    # at h = 1e-5 the probe straddles ReLU/abs kinks and the sharp curvature of instance norm
    # over 4x4 bottleneck maps for several percent of coordinates; 1e-6 stays well above round-off
    h = 1e-6
    rel = []
    with torch.no_grad():
        for k, idx in coords:
            flat = params[k].view(-1)
            orig = flat[idx].item()
            flat[idx] = orig + h
            up = objective().item()
            flat[idx] = orig - h
            down = objective().item()
            flat[idx] = orig
            numeric = (up - down) / (2 * h)
            a = analytic[k].view(-1)[idx].item()
            rel.append(abs(a - numeric) / max(abs(a), abs(numeric), 1e-7))
    good = sum(r < 1e-3 for r in rel) / len(rel)
    elapsed = time.time() - t0
    passed = good >= 0.99 and elapsed < 300
    record(capsys, 3, "gradient check", passed,
           f"{good:.1%} of 200 coordinates with relative error < 1e-3 (worst {max(rel):.2e})", elapsed)
    assert passed


def test_4_sequential_equivalence(capsys):
    t0 = time.time()
    cfg = NetConfig(base_channels=4, n_res_blocks=1, discriminator_layers=4, mask_capacity=4)
    g = torch.Generator().manual_seed(4)
    exact = True
    worst = 0.0
    for trial in range(3):
        bundle = init_networks(cfg, seed=trial, dtype=torch.float64)
        sx = random_sample(trial + 1, 16, 16, g, "X", "x", torch.float64)
        sy = random_sample(3 - trial, 16, 16, g, "Y", "y", torch.float64)
        for G, s in ((bundle.G_XY, sx), (bundle.G_YX, sy)):
            n = s.num_instances
            trace = sequential_translate(G, s.image, to_network_range(s.masks), batch_size=n + trial)
            ordered = to_network_range(s.masks)[instance_order(s.masks)]
            img, masks = G(s.image, ordered)
            exact &= torch.equal(trace.image, img) and torch.equal(trace.masks, masks)

        reference = copy.deepcopy(bundle)
        sequential_training_step(bundle, sx, sy, LossWeights(), batch_size=4, discriminators=False)
        x, a = prepare(sx)
        y, b = prepare(sy)
        with frozen(reference.D_X, reference.D_Y):
            joint_objective(reference, x, a, y, b, 10.0, 10.0, 10.0).backward()
        for p, q in zip(bundle.generator_parameters(), reference.generator_parameters()):
            worst = max(worst, rel_err(p.grad, q.grad))
    elapsed = time.time() - t0
    passed = exact and worst <= 1e-6 and elapsed < 60
    record(capsys, 4, "sequential equivalence", passed,
           f"outputs {'identical' if exact else 'differ'}, worst gradient relative error {worst:.2e}", elapsed)
    assert passed


def test_5_detachment_oracle(capsys):
    t0 = time.time()
    cfg = NetConfig(base_channels=4, n_res_blocks=1, discriminator_layers=4, mask_capacity=4)
    bundle = init_networks(cfg, seed=5, dtype=torch.float64)
    g = torch.Generator().manual_seed(5)
    image = torch.rand(3, 16, 16, generator=g, dtype=torch.float64) * 2 - 1
    masks = to_network_range(distinct_area_masks(4, 16, 16, g, torch.float64))
    ordered = masks[instance_order(masks)]
    reference = copy.deepcopy(bundle)
    lam = LossWeights()

    G, B, D = bundle.G_XY, bundle.G_YX, bundle.D_Y
    params = list(G.parameters()) + list(B.parameters())
    with frozen(D):
        generator_direction(G, B, D, image, ordered, 2, lam)
    total = [p.grad.clone() for p in params]

    rG, rB, rD = reference.G_XY, reference.G_YX, reference.D_Y
    rparams = list(rG.parameters()) + list(rB.parameters())
    with frozen(rD):
        loss1, y1, b1 = step_objective(rG, rB, rD, image, ordered[:2], [], 10.0, 10.0, 10.0)
        g1 = torch.autograd.grad(loss1 / 2, rparams)
        # step 2 rebuilt from constant copies of the step-1 outputs
        loss2, _, _ = step_objective(rG, rB, rD, y1.detach().clone().clamp(-1, 1), ordered[2:],
                                     [b1.detach().clone()], 10.0, 10.0, 10.0)
        g2 = torch.autograd.grad(loss2 / 2, rparams)
    worst = max(rel_err(t - a, b) for t, a, b in zip(total, g1, g2))
    elapsed = time.time() - t0
    passed = worst <= 1e-6 and elapsed < 60
    record(capsys, 5, "detachment oracle", passed, f"worst step-2 gradient relative error {worst:.2e}", elapsed)
    assert passed


def _desk_data(n, seed):
    spec = SyntheticSpec(num_samples=n, seed=seed)
    return synthesize(spec, "X"), synthesize(spec, "Y")


def test_6_determinism(tmp_path, capsys):
    t0 = time.time()
    xs, ys = _desk_data(60, seed=6)
    run = RunConfig(seed=6, checkpoint_every=1000, sample_dump_every=1000)
    logs = []
    for name in ("a", "b"):
        train(run.train_config(), run.net_config(), xs, ys, tmp_path / name, max_steps=100)
        logs.append((tmp_path / name / "losses.jsonl").read_text())
    n_lines = len(logs[0].splitlines())
    elapsed = time.time() - t0
    passed = logs[0] == logs[1] and n_lines == 100 and elapsed < 300
    record(capsys, 6, "determinism", passed,
           f"{n_lines} logged steps, logs {'identical' if logs[0] == logs[1] else 'differ'}", elapsed)
    assert passed


@pytest.mark.slow
def test_7_desk_end_to_end(tmp_path, capsys):
    t0 = time.time()
    root = Path(os.environ.get("INSTRANS_E2E_DIR", tmp_path))
    splits = synthetic_splits(num_train=200, num_test=100, data_seed=0)
    train_sets, test_sets = splits
    classifier = train_domain_classifier(train_sets["X"], train_sets["Y"], test_sets["X"], test_sets["Y"], seed=0)
    attempts = []
    passed = False
    for seed in (0, 1, 2):
        full = run_desk_experiment(root / f"seed{seed}_ctx10", seed=seed, lambda_ctx=10.0, classifier=classifier,
                                   splits=splits)
        rep = full["reports"]
        scores = [rep["X->Y"]["classification_score"], rep["Y->X"]["classification_score"]]
        medians = [rep["X->Y"]["background_l1"]["median"], rep["Y->X"]["background_l1"]["median"]]
        ok_a = min(scores) >= 0.80
        ok_b = max(medians) <= 0.08
        summary = (f"seed {seed}: scores X->Y {scores[0]:.2f} Y->X {scores[1]:.2f}, "
                   f"median bg {medians[0]:.4f}/{medians[1]:.4f}")
        if ok_a and ok_b:
            ablation = run_desk_experiment(root / f"seed{seed}_ctx0", seed=seed, lambda_ctx=0.0,
                                           classifier=classifier, splits=splits)
            arep = ablation["reports"]
            ab_medians = [arep["X->Y"]["background_l1"]["median"], arep["Y->X"]["background_l1"]["median"]]
            ok_c = all(b > a for a, b in zip(medians, ab_medians))
            summary += f", ablation median bg {ab_medians[0]:.4f}/{ab_medians[1]:.4f}"
            passed = ok_c
        attempts.append(summary)
        if passed:
            break
    elapsed = time.time() - t0
    within = elapsed <= 2 * 3600
    record(capsys, 7, "desk-scale end-to-end", passed and within,
           f"classifier accuracy {classifier.heldout_accuracy:.3f}; " + "; ".join(attempts)
           + ("" if within else "; over the 2 h budget"), elapsed)
    assert passed and within


def test_8_checkpoint_roundtrip(tmp_path, capsys):
    t0 = time.time()
    xs, ys = _desk_data(8, seed=8)
    run = RunConfig(seed=8, epochs_const=1, epochs_decay=2, checkpoint_every=1, sample_dump_every=1000)
    cfg, net = run.train_config(), run.net_config()
    train(cfg, net, xs, ys, tmp_path / "full")
    save_checkpoint(load_checkpoint(tmp_path / "full" / "epoch_1.ckpt"), tmp_path / "copy.ckpt")
    original = (tmp_path / "full" / "epoch_1.ckpt").read_bytes()
    identical = (tmp_path / "copy.ckpt").read_bytes() == original
    state, config = state_from_checkpoint(load_checkpoint(tmp_path / "copy.ckpt"))
    identical &= state_to_checkpoint(state, config).to_bytes() == original

    train(cfg, net, xs, ys, tmp_path / "part", max_steps=8)
    train(cfg, net, xs, ys, tmp_path / "part", resume=tmp_path / "part" / "epoch_1.ckpt")
    full = [json.loads(x) for x in (tmp_path / "full" / "losses.jsonl").read_text().splitlines()]
    part = [json.loads(x) for x in (tmp_path / "part" / "losses.jsonl").read_text().splitlines()]
    worst = 0.0
    same_steps = [r["step"] for r in full] == [r["step"] for r in part]
    for a, b in zip(full, part):
        for k in ("gan_G", "gan_D", "cyc", "idt", "ctx", "total"):
            worst = max(worst, abs(a[k] - b[k]) / max(abs(a[k]), 1e-12))
    elapsed = time.time() - t0
    passed = identical and same_steps and worst <= 1e-6 and elapsed < 60
    record(capsys, 8, "checkpoint round-trip", passed,
           f"bytes {'identical' if identical else 'differ'}, {len(part)} resumed-run steps, "
           f"worst loss relative difference {worst:.2e}", elapsed)
    assert passed
