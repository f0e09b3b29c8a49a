"""``phyloproto`` command line.

Exit codes: 0 ok, 2 usage or invalid input, 3 I/O, 4 numeric failure,
5 consistency failure (tree mismatch, holdout refusal).
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .config import ConfigError, RunConfig
from .data import DataError, default_trait_spec, generate_synthetic, load_manifest, write_dataset
from .evaluation import (
    MissingParts,
    export_heatmap,
    heatmap_name,
    infer,
    part_purity,
    run_metrics,
    unseen_accuracy,
)
from .masking import mask_report, report_csv
from .model import build_model
from .phylo import PhyloError, parse_newick, read_newick, tree_digest
from .pnm import PNMError, load_image
from .training import NonFiniteLoss, TrainingProgress, run_training

log = logging.getLogger("phyloproto")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC, EXIT_CONSISTENCY = 0, 2, 3, 4, 5

CHECKPOINT_NAME = "checkpoint.ppck"


class CommandError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


class TreeMismatch(CommandError):
    def __init__(self, message: str):
        super().__init__(message, EXIT_CONSISTENCY)


def _finite(obj):
    """NaN and infinities become null so the output stays strict JSON."""
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    return obj


def _write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    text = json.dumps(_finite(payload), indent=2, sort_keys=True, allow_nan=False)
    path.write_text(text + "\n", encoding="utf-8")


def _resolve_node(tree, text: str) -> int:
    """Node index from an integer, an internal label like ``node5`` or a species name."""
    if text.lstrip("-").isdigit():
        node = int(text)
        tree.check(node)
        return node
    if text in tree.leaf_map:
        return tree.leaf_map[text]
    for n in range(len(tree)):
        if tree.node_label(n) == text:
            return n
    raise CommandError(f"no node called {text!r}", EXIT_USAGE)


def _load_data(path):
    try:
        return load_manifest(path)
    except FileNotFoundError as err:
        raise CommandError(f"cannot read dataset: {err}", EXIT_IO) from None
    except (DataError, PNMError, KeyError) as err:
        raise CommandError(f"bad dataset at {path}: {err}", EXIT_IO) from None


def _load_checkpoint(path):
    try:
        return ckpt.load_model(path)
    except FileNotFoundError as err:
        raise CommandError(f"cannot read checkpoint: {err}", EXIT_IO) from None
    except ckpt.CheckpointError as err:
        raise CommandError(str(err), EXIT_IO) from None


def _check_tree(model, data_dir) -> None:
    """The checkpoint's tree must be the dataset's tree."""
    manifest = Path(data_dir)
    if manifest.is_dir():
        manifest = manifest / "manifest.json"
    try:
        raw = json.loads(manifest.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as err:
        raise CommandError(f"cannot read manifest: {err}", EXIT_IO) from None
    want = tree_digest(model.tree)
    have = raw.get("tree_digest")
    if have is None:
        tree_file = manifest.parent / raw.get("phylogeny", "tree.nwk")
        try:
            have = tree_digest(read_newick(tree_file))
        except (OSError, PhyloError) as err:
            raise CommandError(f"cannot read dataset tree: {err}", EXIT_IO) from None
    if have != want:
        raise TreeMismatch(f"checkpoint tree {want} does not match dataset tree {have}")


def _out_dir(args) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    return Path(args.checkpoint).resolve().parent


# -- commands --------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    try:
        if args.tree == "default":
            from .data import DEFAULT_TREE

            tree = parse_newick(DEFAULT_TREE)
        else:
            tree = read_newick(args.tree)
    except OSError as err:
        raise CommandError(f"cannot read tree: {err}", EXIT_IO) from None
    except PhyloError as err:
        raise CommandError(f"bad tree: {err}", EXIT_USAGE) from None
    omit = [_resolve_node(tree, args.no_common_at)] if args.no_common_at else []
    if omit and omit[0] == tree.root:
        raise CommandError("the root carries no glyph to omit", EXIT_USAGE)
    try:
        spec = default_trait_spec(tree, omit=omit, image_side=args.image_side)
        ds = generate_synthetic(tree, spec, args.per_leaf, args.seed, args.train_fraction)
    except DataError as err:
        raise CommandError(str(err), EXIT_USAGE) from None
    traits = {
        tree.node_label(n): {"node": n, "shape": g.shape, "color": list(g.color), "size": g.size}
        for n, g in sorted(spec.glyphs.items())
    }
    extra = {"tree_digest": tree_digest(tree), "traits": traits, "omitted": [tree.node_label(n) for n in omit]}
    try:
        path = write_dataset(ds, args.out, extra=extra)
    except OSError as err:
        raise CommandError(f"cannot write dataset: {err}", EXIT_IO) from None
    print(f"wrote {len(ds)} images and {path}")
    return EXIT_OK


def _train_split(ds, holdout):
    train = ds.by_split("train")
    return train.without_species(holdout) if holdout else train


def cmd_train(args) -> int:
    try:
        run = RunConfig.load(args.config)
    except OSError as err:
        raise CommandError(f"cannot read config: {err}", EXIT_IO) from None
    except (ConfigError, TypeError) as err:
        raise CommandError(f"invalid config: {err}", EXIT_USAGE) from None
    data_dir = Path(run.data)
    if not data_dir.is_absolute():
        data_dir = Path(args.config).resolve().parent / data_dir
    ds = _load_data(data_dir)
    unknown = [s for s in run.holdout if s not in ds.tree.leaf_map]
    if unknown:
        raise CommandError(f"holdout names unknown species {unknown}", EXIT_USAGE)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", run.to_dict())

    ckpt_path = out / CHECKPOINT_NAME
    progress = TrainingProgress()
    if args.resume and ckpt_path.exists():
        model, meta = _load_checkpoint(ckpt_path)
        if model.cfg.to_dict() != run.model.to_dict():
            raise CommandError("checkpoint was written under a different config", EXIT_CONSISTENCY)
        progress = ckpt.load_progress(ckpt_path)
        log_mode = "a"
    else:
        model = build_model(ds.tree, run.model)
        log_mode = "w"
    train = _train_split(ds, run.holdout)
    meta = {"holdout": list(run.holdout), "tree_digest": tree_digest(ds.tree)}

    def save(record=None):
        ckpt.save_model(ckpt_path, model, {**meta, "epoch": progress.epoch}, progress=progress)

    try:
        with open(out / "losses.jsonl", log_mode, encoding="utf-8") as fh:
            run_training(model, train, on_epoch=lambda r: (fh.flush(), save(r)), log_file=fh, progress=progress)
    except NonFiniteLoss as err:
        _write_json(out / "diagnostic.json", err.diagnostic)
        raise CommandError(f"{err} (diagnostic in {out / 'diagnostic.json'})", EXIT_NUMERIC) from None
    save()
    val = ds.by_split("val")
    if run.holdout:
        val = val.without_species(run.holdout)
    _write_json(out / "metrics.json", run_metrics(model, val, run.eval_top_k, epochs=progress.epoch))
    print(f"trained {progress.epoch} epochs; outputs in {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, meta = _load_checkpoint(args.checkpoint)
    _check_tree(model, args.data)
    ds = _load_data(args.data)
    out = _out_dir(args)
    if args.holdout:
        if args.holdout not in ds.tree.leaf_map:
            raise CommandError(f"unknown species {args.holdout!r}", EXIT_USAGE)
        if args.holdout not in meta.get("holdout", []):
            raise CommandError(f"{args.holdout} was part of training; refusing unseen-species evaluation", EXIT_CONSISTENCY)
        leaf = ds.tree.leaf_map[args.holdout]
        images = ds.of_species([args.holdout]).images
        acc = unseen_accuracy(model, images, ds.tree.parent(leaf))
        metrics = {
            "holdout": args.holdout,
            "true_parent": ds.tree.node_label(ds.tree.parent(leaf)),
            "unseen_accuracy": acc,
            "n_images": int(len(images)),
            "seed": model.cfg.seed,
        }
    else:
        split = ds.by_split(args.split) if args.split != "all" else ds
        held = meta.get("holdout", [])
        if held:
            split = split.without_species(held)
        metrics = run_metrics(model, split, args.top_k, epochs=meta.get("epoch"))
    _write_json(out / "metrics.json", metrics)
    print(json.dumps(metrics, sort_keys=True))
    return EXIT_OK


def cmd_purity(args) -> int:
    model, meta = _load_checkpoint(args.checkpoint)
    _check_tree(model, args.data)
    ds = _load_data(args.data).by_split(args.split)
    held = meta.get("holdout", [])
    if held:
        ds = ds.without_species(held)
    try:
        rep = part_purity(model, ds, args.top_k)
    except MissingParts as err:
        raise CommandError(str(err), EXIT_CONSISTENCY) from None
    _write_json(_out_dir(args) / "purity.json", rep.to_dict(model.tree))
    print(f"purity {rep.unmasked[0]:.3f} ± {rep.unmasked[1]:.3f} over unmasked prototypes; {rep.pct_masked:.1f}% masked")
    return EXIT_OK


def cmd_mask_report(args) -> int:
    model, meta = _load_checkpoint(args.checkpoint)
    _check_tree(model, args.data)
    ds = _load_data(args.data).by_split(args.split)
    held = meta.get("holdout", [])
    if held:
        ds = ds.without_species(held)
    rows = mask_report(model, ds.images, ds.labels, args.top_k)
    path = _out_dir(args) / "mask.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report_csv(rows), encoding="utf-8")
    print(f"{sum(r.masked for r in rows)} of {len(rows)} prototypes masked; table in {path}")
    return EXIT_OK


def cmd_viz(args) -> int:
    model, _ = _load_checkpoint(args.checkpoint)
    node = _resolve_node(model.tree, args.node)
    if node not in model.heads:
        raise CommandError(f"node {args.node} is a leaf and has no prototypes", EXIT_USAGE)
    K = model.heads[node].K
    if not 0 <= args.proto < K:
        raise CommandError(f"node {args.node} has prototypes 0..{K - 1}", EXIT_USAGE)
    out = _out_dir(args) / "heatmaps"
    out.mkdir(parents=True, exist_ok=True)
    side = model.cfg.image_side
    for b, path in enumerate(args.image):
        try:
            img = load_image(path)
        except OSError as err:
            raise CommandError(f"cannot read {path}: {err}", EXIT_IO) from None
        except PNMError as err:
            raise CommandError(f"{path}: {err}", EXIT_IO) from None
        if img.shape != (side, side, 3):
            raise CommandError(f"{path} is {img.shape[1]}x{img.shape[0]}, model expects {side}x{side}", EXIT_USAGE)
        target = out / heatmap_name(node, args.proto, b)
        _, info = export_heatmap(model, img, node, args.proto, target)
        print(f"{target}: peak {info['peak']}, score {info['pooled']:.4f}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------------


def _eval_common(p: argparse.ArgumentParser, splits=("train", "val")) -> None:
    p.add_argument("--checkpoint", required=True, help="checkpoint written by train")
    p.add_argument("--data", required=True, help="dataset directory or manifest.json")
    p.add_argument("--out", help="output directory (default: the checkpoint's directory)")
    p.add_argument("--top-k", type=int, default=10, help="images per species in purity and post-hoc scores")
    p.add_argument("--split", choices=list(splits), default="val")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="phyloproto", description="Phylogeny-guided prototype networks.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render the synthetic planted-glyph dataset")
    p.add_argument("--tree", required=True, help="Newick file, or 'default' for the built-in 8-leaf tree")
    p.add_argument("--out", required=True)
    p.add_argument("--per-leaf", type=int, default=80)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-common-at", metavar="NODE", help="omit this node's glyph (index, label or species)")
    p.add_argument("--train-fraction", type=float, default=0.75)
    p.add_argument("--image-side", type=int, default=52)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model from a JSON run config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", action="store_true", help="continue from OUT/checkpoint.ppck if present")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy metrics, or unseen-species accuracy with --holdout")
    _eval_common(p, splits=("train", "val", "all"))
    p.add_argument("--holdout", metavar="SPECIES", help="species left out of training")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("purity", help="part purity of every prototype")
    _eval_common(p)
    p.set_defaults(func=cmd_purity)

    p = sub.add_parser("mask-report", help="per-prototype over-specificity and mask table")
    _eval_common(p)
    p.set_defaults(func=cmd_mask_report)

    p = sub.add_parser("viz", help="export prototype score maps as PGM heatmaps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, nargs="+", help="one or more P6 images")
    p.add_argument("--node", required=True, help="node index or label")
    p.add_argument("--proto", required=True, type=int)
    p.add_argument("--out", help="output directory (default: the checkpoint's directory)")
    p.set_defaults(func=cmd_viz)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except CommandError as err:
        print(f"phyloproto {args.command}: {err}", file=sys.stderr)
        return err.code
    except (PhyloError, IndexError) as err:
        print(f"phyloproto {args.command}: {err}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as err:
        print(f"phyloproto {args.command}: numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as err:
        print(f"phyloproto {args.command}: {err}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
