"""Command-line entry point.

Subcommands: ``synth``, ``ingest-coco``, ``train``, ``translate``, ``eval``.
Exit codes: 0 success, 2 usage error, 3 training abort, 4 evaluation
precondition failure (domain classifier below its accuracy floor), 1 other
failures.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import torch

from . import config as cfg
from .checkpoint import CheckpointError, load_checkpoint
from .coco import IngestionError, ingest_coco_category
from .data import (DatasetError, Sample, load_dataset, load_sample, preprocess, to_network_range, to_unit_range,
                   write_image, write_mask)
from .evaluation import (ClassifierAccuracyError, MaskCorpus, classification_score, crop_attach_baseline,
                         evaluate_direction, nearest_neighbor_masks, train_domain_classifier, translate_all)
from .sequential import SequentialTrace, sequential_translate
from .synthetic import SHAPES, SyntheticSpec, generate_synthetic
from .trainer import TrainingAborted, bundle_from_checkpoint, train

log = logging.getLogger("instrans")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_ABORT, EXIT_EVAL = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


def _int_pair(text: str):
    parts = text.replace("x", ",").split(",")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected two integers like 64,64, got {text!r}")
    try:
        return int(parts[0]), int(parts[1])
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected two integers like 64,64, got {text!r}") from None


def _index_list(text: str) -> List[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated indices, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    # SUPPRESS keeps a subcommand's unset flag from clobbering one given before it
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="flat TOML file with run settings")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--profile", choices=sorted(cfg.PROFILES))
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="instrans", parents=[common],
                                     description="Instance-aware unpaired image-to-image translation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate the synthetic two-domain shape dataset")
    p.add_argument("--num-samples", type=int, default=200)
    p.add_argument("--instances", type=_int_pair, default=(1, 2), help="min,max instances per image")
    p.add_argument("--shape-x", choices=SHAPES, default="circle")
    p.add_argument("--shape-y", choices=SHAPES, default="triangle")
    p.add_argument("--size-range", type=_int_pair, default=(18, 30))
    p.add_argument("--resolution", type=_int_pair, default=(64, 64), help="H,W")

    p = sub.add_parser("ingest-coco", parents=[common], help="extract one COCO category as a mask dataset")
    p.add_argument("--annotations", required=True)
    p.add_argument("--images", required=True, help="directory holding the COCO images")
    p.add_argument("--category", required=True)
    p.add_argument("--domain", choices=["X", "Y"], default="X")
    p.add_argument("--resolution", type=_int_pair, default=(200, 200), help="H,W")
    p.add_argument("--include-crowd", action="store_true")

    p = sub.add_parser("train", parents=[common], help="train both translation directions")
    p.add_argument("--data-x", help="manifest of domain X")
    p.add_argument("--data-y", help="manifest of domain Y")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--max-steps", type=int)
    for name in ("lambda-cyc", "lambda-idt", "lambda-ctx", "lr-G", "lr-D"):
        p.add_argument(f"--{name}", type=float)
    for name in ("epochs-const", "epochs-decay", "batch-size", "sample-batch", "pool-size", "base-channels",
                 "n-res-blocks", "mask-capacity", "checkpoint-every", "sample-dump-every"):
        p.add_argument(f"--{name}", type=int)
    p.add_argument("--resolution", type=_int_pair)

    p = sub.add_parser("translate", parents=[common], help="translate one image and its instance masks")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--masks", nargs="+", required=True)
    p.add_argument("--direction", choices=["XY", "YX"], default="XY")
    p.add_argument("--instances", type=_index_list, help="comma-separated mask indices to translate")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--trace", action="store_true", help="also write a per-step PNG grid")

    p = sub.add_parser("eval", parents=[common], help="score a checkpoint on held-out data")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--train-x", required=True, help="real X manifest for the domain classifier")
    p.add_argument("--train-y", required=True)
    p.add_argument("--test-x", required=True, help="held-out X manifest (translated and scored)")
    p.add_argument("--test-y", required=True)
    p.add_argument("--metric", choices=["scores", "nn"], default="scores")
    p.add_argument("--baseline", choices=["crop-attach"])
    p.add_argument("--batch-size", type=int)
    p.add_argument("--k", type=int, default=3, help="neighbours per mask for --metric nn")
    p.add_argument("--csv", action="store_true", help="also write per-image scores as CSV")
    return parser


def _resolve(args, overrides: Optional[dict] = None) -> cfg.RunConfig:
    try:
        file_values = cfg.read_config_file(args.config) if getattr(args, "config", None) else {}
        values = {k: getattr(args, k, None) for k in ("seed", "out", "profile")}
        values.update(overrides or {})
        run = cfg.resolve("desk", file_values, values)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    print(run.echo())
    return run


def _require_out(run: cfg.RunConfig) -> Path:
    if not run.out:
        raise UsageError("--out is required (flag or config file)")
    return Path(run.out)


def cmd_synth(args) -> int:
    run = _resolve(args)
    out = _require_out(run)
    try:
        spec = SyntheticSpec(num_samples=args.num_samples, instances_per_image=tuple(args.instances),
                             shape_X=args.shape_x, shape_Y=args.shape_y, size_range=tuple(args.size_range),
                             resolution=tuple(args.resolution), seed=run.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    mx, my = generate_synthetic(spec, out)
    cfg.write_resolved(run, out)
    for name, m in (("X", mx), ("Y", my)):
        n_masks = sum(len(e.masks) for e in m.entries)
        print(f"domain {name}: {len(m)} images, {n_masks} instances -> {m.path}")
    return EXIT_OK


def cmd_ingest(args) -> int:
    run = _resolve(args)
    out = _require_out(run)
    m = ingest_coco_category(args.annotations, args.images, args.category, out, args.domain,
                             tuple(args.resolution), args.include_crowd)
    print(f"{args.category}: {len(m)} images, {sum(len(e.masks) for e in m.entries)} instances -> {m.path}")
    return EXIT_OK


def cmd_train(args) -> int:
    overrides = {
        "data_X": args.data_x, "data_Y": args.data_y, "lambda_cyc": args.lambda_cyc, "lambda_idt": args.lambda_idt,
        "lambda_ctx": args.lambda_ctx, "lr_G": args.lr_G, "lr_D": args.lr_D, "epochs_const": args.epochs_const,
        "epochs_decay": args.epochs_decay, "instance_batch_size": args.batch_size, "sample_batch": args.sample_batch,
        "pool_size": args.pool_size, "base_channels": args.base_channels, "n_res_blocks": args.n_res_blocks,
        "mask_capacity": args.mask_capacity, "checkpoint_every": args.checkpoint_every,
        "sample_dump_every": args.sample_dump_every, "resolution": args.resolution,
    }
    run = _resolve(args, overrides)
    out = _require_out(run)
    if not (run.data_X and run.data_Y):
        raise UsageError("--data-x and --data-y are required (flag or config file)")
    cfg.write_resolved(run, out)
    ds_x = load_dataset(run.data_X, run.resolution, run.min_instance_area, run.mask_capacity)
    ds_y = load_dataset(run.data_Y, run.resolution, run.min_instance_area, run.mask_capacity)
    print(f"training on {len(ds_x)} X / {len(ds_y)} Y samples "
          f"(skipped {len(ds_x.skipped)} / {len(ds_y.skipped)} without instances)")
    try:
        train(run.train_config(), run.net_config(), ds_x.samples, ds_y.samples, out, resume=args.resume,
              max_steps=args.max_steps, extra_header={"run": run.to_dict()})
    except TrainingAborted as exc:
        print(f"training aborted: {exc}; checkpoint kept at {exc.checkpoint_path}", file=sys.stderr)
        return EXIT_ABORT
    print(f"final checkpoint: {out / 'final.ckpt'}")
    return EXIT_OK


def _run_header(ckpt) -> dict:
    return ckpt.header.get("run") or {}


def save_trace_grid(trace: SequentialTrace, path):
    """One row per step: x_m | union(a_m) | y'_m | union(b'_m)."""
    rows = []
    for s in trace.steps:
        gray = lambda m: to_unit_range(m).amax(0).expand(3, -1, -1) * 2 - 1  # noqa: E731
        rows.append(torch.cat([s.x, gray(s.a), s.y, gray(s.b)], dim=2))
    write_image(torch.cat(rows, dim=1), path)


def cmd_translate(args) -> int:
    run = _resolve(args)
    out = _require_out(run)
    try:
        ckpt = load_checkpoint(args.checkpoint)
        bundle = bundle_from_checkpoint(ckpt)
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    header = _run_header(ckpt)
    resolution = tuple(header.get("resolution", run.resolution))
    bs = args.batch_size or ckpt.header["train_config"]["instance_batch_size"]
    from .data import ManifestEntry

    domain = "X" if args.direction == "XY" else "Y"
    sample = load_sample(ManifestEntry(Path(args.image), [Path(m) for m in args.masks], domain))
    sample = preprocess(sample, resolution, 1)
    if sample.num_instances != len(args.masks):
        raise UsageError("some masks are empty at the model resolution")
    chosen = args.instances if args.instances is not None else list(range(sample.num_instances))
    bad = [i for i in chosen if not 0 <= i < sample.num_instances]
    if bad or not chosen:
        raise UsageError(f"instance indices {bad or chosen} out of range for {sample.num_instances} masks")
    masks = sample.masks[chosen]
    G = bundle.G_XY if args.direction == "XY" else bundle.G_YX
    with torch.no_grad():
        trace = sequential_translate(G, sample.image, to_network_range(masks), bs)
    translated = torch.empty_like(trace.masks)
    translated[trace.order] = trace.masks
    out.mkdir(parents=True, exist_ok=True)
    write_image(trace.image, out / "translated.png")
    for k, i in enumerate(chosen):
        write_mask(to_unit_range(translated[k]), out / f"mask_{i}.png")
    if args.trace:
        save_trace_grid(trace, out / "trace.png")
    from .evaluation import background_preservation_error

    bg = background_preservation_error(sample.image, sample.masks, trace.image, translated)
    summary = {"instances": chosen, "steps": trace.M, "background_l1": bg}
    (out / "translate.json").write_text(json.dumps(summary, indent=1) + "\n")
    print(json.dumps(summary))
    return EXIT_OK


def cmd_eval(args) -> int:
    run = _resolve(args)
    out = _require_out(run)
    ckpt = load_checkpoint(args.checkpoint)
    bundle = bundle_from_checkpoint(ckpt)
    header = _run_header(ckpt)
    resolution = tuple(header.get("resolution", run.resolution))
    bs = args.batch_size or ckpt.header["train_config"]["instance_batch_size"]
    load = lambda p: load_dataset(p, resolution, run.min_instance_area, run.mask_capacity).samples  # noqa: E731
    train_x, train_y, test_x, test_y = load(args.train_x), load(args.train_y), load(args.test_x), load(args.test_y)
    out.mkdir(parents=True, exist_ok=True)

    if args.metric == "nn":
        pools = {"X": train_x, "Y": train_y}
        corpus = {d: MaskCorpus.from_samples(p) for d, p in pools.items()}
        rows = []
        for G, samples, target in ((bundle.G_XY, test_x, "Y"), (bundle.G_YX, test_y, "X")):
            for s, (_, masks) in zip(samples, translate_all(G, samples, bs)):
                for j in range(masks.shape[0]):
                    query = (masks[j] > 0).float()
                    for rank, (idx, dist) in enumerate(nearest_neighbor_masks(query, corpus[target].masks, args.k)):
                        si, mi = corpus[target].owners[idx]
                        rows.append({"sample": s.id, "mask": j, "rank": rank + 1, "neighbor_sample": pools[target][si].id,
                                     "neighbor_mask": mi, "distance": round(dist, 6)})
        with open(out / "nearest_neighbors.csv", "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=list(rows[0]) if rows else ["sample"])
            w.writeheader()
            w.writerows(rows)
        print(f"{len(rows)} neighbour rows -> {out / 'nearest_neighbors.csv'}")
        return EXIT_OK

    try:
        clf = train_domain_classifier(train_x, train_y, test_x, test_y, seed=run.seed)
    except ClassifierAccuracyError as exc:
        print(f"evaluation precondition failed: {exc}", file=sys.stderr)
        return EXIT_EVAL
    result = {}
    per_image = []
    for G, samples, target in ((bundle.G_XY, test_x, "Y"), (bundle.G_YX, test_y, "X")):
        translated = translate_all(G, samples, bs)
        rep = evaluate_direction(G, samples, clf, target, bs, translated=translated)
        if args.baseline == "crop-attach":
            corpus_src = train_y if target == "Y" else train_x
            corpus = MaskCorpus.from_samples(corpus_src)
            base_imgs = [crop_attach_baseline(s, corpus_src, corpus) for s in samples]
            for s, img in zip(samples, base_imgs):
                write_image(img, out / "crop_attach" / f"{s.id}.png")
            rep.extra["crop_attach_classification_score"] = classification_score(clf, base_imgs, target)
        result[rep.direction] = rep.to_dict()
        if args.csv:
            preds = clf.predict(torch.stack([t[0] for t in translated]))
            for s, p in zip(samples, preds.tolist()):
                per_image.append({"direction": rep.direction, "sample": s.id, "predicted": "XY"[p],
                                  "target": target})
    (out / "eval_report.json").write_text(json.dumps(result, indent=1, sort_keys=True) + "\n")
    if args.csv:
        with open(out / "per_image.csv", "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=["direction", "sample", "predicted", "target"])
            w.writeheader()
            w.writerows(per_image)
    print(json.dumps(result, indent=1, sort_keys=True))
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "ingest-coco": cmd_ingest, "train": cmd_train, "translate": cmd_translate,
            "eval": cmd_eval}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with 2 on usage errors
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"{parser.prog} {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, IngestionError, CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
