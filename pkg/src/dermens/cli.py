"""Command line entry point.

Exit status: 0 on success, 2 on validation errors, 1 on runtime errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import augment, nettopo
from .ensemble import FUSERS, ScoreTable, forward_selection, greedy_selection
from .errors import ContractError, ValidationError
from .imaging import read_image, read_mask, resize_bilinear, to_gray, write_png
from .metrics import evaluate, roc_curve, seg_metrics
from .pipeline import (
    ExperimentConfig,
    FeatureStore,
    build_contexts,
    extract_features,
    ingest_external_features,
    load_manifest,
    load_models,
    run_experiment,
    score_entries,
    segment_fuse,
)
from .sparse import DEFAULT_ATOMS, DEFAULT_ITERATIONS, DEFAULT_LAMBDA, ENCODE_SIZE, extract_patches, learn_dictionary

log = logging.getLogger("dermens")


def _config(args) -> ExperimentConfig:
    if not args.config:
        raise ValidationError("--config is required")
    cfg = ExperimentConfig.load(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.folds is not None:
        cfg = replace(cfg, folds=args.folds)
    return cfg


def _need(args, *names):
    for n in names:
        if getattr(args, n) is None:
            raise ValidationError(f"--{n.replace('_', '-')} is required")


def cmd_extract(args):
    _need(args, "manifest", "store")
    cfg = _config(args)
    n = extract_features(cfg, load_manifest(args.manifest), FeatureStore(args.store))
    print(f"wrote {n} feature records to {args.store}")


def cmd_ingest(args):
    _need(args, "store")
    registry = ExperimentConfig.load(args.config).registry() if args.config else None
    records = ingest_external_features(args.file, registry)
    FeatureStore(args.store).put_many(records)
    print(f"ingested {len(records)} records into {args.store}")


def cmd_train(args):
    _need(args, "manifest", "store")
    cfg = _config(args)
    result = run_experiment(cfg, load_manifest(args.manifest), FeatureStore(args.store), args.out)
    print(json.dumps({"selected": result.report["selected"], "splits": result.report["splits"]}, indent=2))


def cmd_predict(args):
    _need(args, "manifest", "store")
    models = load_models(args.models)
    entries = load_manifest(args.manifest)
    if args.split:
        entries = [e for e in entries if e.split == args.split]
    table = score_entries(models, entries, FeatureStore(args.store))
    subset = _subset(table, args.components)
    fused = FUSERS[args.fusion.upper()](table, subset)
    Path(args.out).write_text(table.to_csv({"fused": fused}))
    print(f"scored {len(entries)} samples -> {args.out}")


def _subset(table: ScoreTable, names):
    if not names:
        return list(range(len(table.components)))
    missing = [n for n in names if n not in table.components]
    if missing:
        raise ValidationError(f"unknown components: {', '.join(missing)}")
    return [table.index(n) for n in names]


def _read_scores(path, column):
    text = Path(path).read_text()
    table = ScoreTable.from_csv(text, drop=())
    if column not in table.components:
        raise ValidationError(f"column {column!r} not in {path}")
    return table, table.scores[:, table.index(column)]


def cmd_evaluate_cls(args):
    table, scores = _read_scores(args.scores, args.column)
    if table.labels is None:
        raise ValidationError("score table has no labels")
    out = {}
    for split in sorted(set(table.splits)) + ["all"]:
        rows = np.ones(len(table.sample_ids), bool) if split == "all" else np.array([s == split for s in table.splits])
        lab = table.labels[rows]
        if not rows.any() or np.any(lab < 0):
            continue
        out[split] = evaluate(scores[rows], lab, args.threshold).to_dict()
        if args.roc and split == "all" and lab.min() != lab.max():
            Path(args.roc).write_text(roc_curve(scores[rows], lab).to_csv())
    text = json.dumps(out, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)


def cmd_evaluate_seg(args):
    _need(args, "manifest")
    pred_dir = Path(args.pred_dir)
    per_sample = {}
    for e in load_manifest(args.manifest):
        if e.mask_path is None:
            continue
        path = pred_dir / f"{e.sample_id}.png"
        if not path.exists():
            raise ValidationError(f"no predicted mask for {e.sample_id} in {pred_dir}")
        per_sample[e.sample_id] = seg_metrics(read_mask(path), read_mask(e.mask_path)).to_dict()
    if not per_sample:
        raise ValidationError("manifest has no ground-truth masks")
    keys = ("jaccard", "acc", "sens", "spec")
    summary = {k: float(np.mean([m[k] for m in per_sample.values()])) for k in keys}
    text = json.dumps({"mean": summary, "samples": per_sample}, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(json.dumps(summary, indent=2, sort_keys=True))


def cmd_select(args):
    table = ScoreTable.from_csv(Path(args.scores).read_text())
    if args.split:
        table = table.subset_rows([s == args.split for s in table.splits])
    folds = args.folds or 3
    seed = args.seed or 0
    pick = greedy_selection if args.method == "greedy" else forward_selection
    selected, trace = pick(table, folds, seed)
    if args.out:
        Path(args.out).write_text(trace.to_csv())
    print(json.dumps({"selected": [table.components[k] for k in selected]}, indent=2))


def cmd_fuse(args):
    table = ScoreTable.from_csv(Path(args.scores).read_text())
    subset = _subset(table, args.components)
    fused = FUSERS[args.mode.upper()](table, subset, **({"threshold": args.threshold} if args.mode.upper() == "VOTE" else {}))
    Path(args.out).write_text(table.to_csv({"fused": fused}))
    print(f"fused {len(subset)} components -> {args.out}")


def cmd_segment_fuse(args):
    written = segment_fuse(args.masks, args.out)
    print(f"wrote {len(written)} fused masks to {args.out}")


def cmd_net_info(args):
    if args.config:
        cfg = nettopo.UNetConfig.from_dict(json.loads(Path(args.config).read_text()))
    else:
        cfg = nettopo.TABLE2[args.row - 1]
    cfg = nettopo.with_overrides(
        cfg, input_size=args.input_size, kernel_size=args.kernel_size, pool_size=args.pool_size,
        n_filters_stage1=args.filters, fc_dim=args.fc_dim,
    )
    print(nettopo.layer_table(cfg))
    total = nettopo.param_count(cfg)
    diff = total - nettopo.REPORTED_PARAMS
    print(f"reported total for the published network: {nettopo.REPORTED_PARAMS:,} (difference {diff:+,})")


def cmd_augment_preview(args):
    img = read_image(args.image)
    mask = read_mask(args.mask) if args.mask else None
    if args.config:
        ranges_d = ExperimentConfig.load(args.config).augmentation
        ranges = augment.AugmentRanges.for_size(img.width, img.height, **{k: tuple(v) for k, v in ranges_d.items()})
    else:
        ranges = augment.AugmentRanges.for_size(img.width, img.height)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    base_seed = args.seed or 0
    for i in range(args.count):
        params = augment.sample_params(base_seed + i, ranges)
        aug_img, aug_mask = augment.apply(img, mask, params)
        write_png(out / f"aug_{i:03d}.png", aug_img)
        if aug_mask is not None:
            write_png(out / f"aug_{i:03d}_mask.png", aug_mask)
        (out / f"aug_{i:03d}.json").write_text(json.dumps(params.to_dict(), indent=2) + "\n")
    print(f"wrote {args.count} augmented samples to {out}")


def cmd_learn_dictionary(args):
    _need(args, "manifest")
    entries = [e for e in load_manifest(args.manifest) if e.split == "train"]
    rng = np.random.default_rng(args.seed or 0)
    patches = []
    for e in entries:
        ctx = build_contexts(e)
        if args.context not in ctx:
            continue
        img = ctx[args.context]
        if args.colorspace == "GRAY":
            img = to_gray(img)
        p = extract_patches(resize_bilinear(img, ENCODE_SIZE, ENCODE_SIZE), 8, 1)
        take = min(args.patches_per_image, p.shape[0])
        patches.append(p[rng.choice(p.shape[0], size=take, replace=False)])
    if not patches:
        raise ValidationError(f"no training images provide context {args.context}")
    trace = []
    d = learn_dictionary(np.vstack(patches), args.atoms, args.lam, args.iterations, args.seed or 0,
                         colorspace=args.colorspace, trace=trace)
    d.save(args.out)
    print(f"dictionary {d.atom_dim}x{d.n_atoms} -> {args.out}; final surrogate {trace[-1][1]:.6g}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--folds", type=int, default=None)
    common.add_argument("--store", default=None, help="feature store (newline-delimited JSON)")
    common.add_argument("--manifest", default=None, help="dataset manifest CSV")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="dermens", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("extract", parents=[common], help="compute features into the store")
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("ingest", parents=[common], help="validate and store precomputed deep features")
    s.add_argument("file")
    s.add_argument("--config", help="config declaring extra external features")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("train", parents=[common], help="run a full experiment and write the output bundle")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("predict", parents=[common], help="score samples with trained models")
    s.add_argument("--models", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--split", choices=["train", "validation", "test"])
    s.add_argument("--fusion", choices=["avg", "vote", "AVG", "VOTE"], default="AVG")
    s.add_argument("--components", nargs="*")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("evaluate-cls", parents=[common], help="classification metrics from a score CSV")
    s.add_argument("--scores", required=True)
    s.add_argument("--column", default="fused")
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--out")
    s.add_argument("--roc", help="write the ROC curve CSV here")
    s.set_defaults(func=cmd_evaluate_cls)

    s = sub.add_parser("evaluate-seg", parents=[common], help="pixel-wise segmentation metrics")
    s.add_argument("--pred-dir", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_evaluate_seg)

    s = sub.add_parser("select", parents=[common], help="ensemble component selection")
    s.add_argument("method", choices=["greedy", "forward"])
    s.add_argument("--scores", required=True)
    s.add_argument("--split", default="train")
    s.add_argument("--out")
    s.set_defaults(func=cmd_select)

    s = sub.add_parser("fuse", parents=[common], help="average or vote fusion of a score CSV")
    s.add_argument("mode", choices=["avg", "vote"])
    s.add_argument("--scores", required=True)
    s.add_argument("--components", nargs="*")
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fuse)

    s = sub.add_parser("segment-fuse", parents=[common], help="fuse ensemble confidence masks")
    s.add_argument("--masks", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_segment_fuse)

    s = sub.add_parser("net-info", parents=[common], help="U-Net layer table and parameter count")
    s.add_argument("--config", help="JSON file with U-Net parameters")
    s.add_argument("--row", type=int, default=1, choices=range(1, len(nettopo.TABLE2) + 1))
    s.add_argument("--input-size", type=int)
    s.add_argument("--kernel-size", type=int)
    s.add_argument("--pool-size", type=int)
    s.add_argument("--filters", type=int)
    s.add_argument("--fc-dim", type=int)
    s.set_defaults(func=cmd_net_info)

    s = sub.add_parser("augment-preview", parents=[common], help="write augmented copies of an image")
    s.add_argument("--image", required=True)
    s.add_argument("--mask")
    s.add_argument("--config", help="experiment config with augmentation ranges")
    s.add_argument("--count", type=int, default=4)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_augment_preview)

    s = sub.add_parser("learn-dictionary", parents=[common], help="train a sparse-coding dictionary")
    s.add_argument("--context", choices=["WI", "CR", "CRGT"], default="WI")
    s.add_argument("--colorspace", choices=["RGB", "GRAY"], default="RGB")
    s.add_argument("--atoms", type=int, default=DEFAULT_ATOMS)
    s.add_argument("--iterations", type=int, default=DEFAULT_ITERATIONS)
    s.add_argument("--lam", type=float, default=DEFAULT_LAMBDA)
    s.add_argument("--patches-per-image", type=int, default=200)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_learn_dictionary)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ValidationError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.debug("runtime failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
