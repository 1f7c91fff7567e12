"""Command-line entry point: generate, train, eval, compare, export, gradcheck.

Exit codes: 0 success, 1 validation error, 2 runtime numerical failure.
Set DYNMLP_LOG_LEVEL (e.g. INFO) for progress output.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import autograd as ag
from .analysis import (
    classifier_weight_distances,
    compare_strategies,
    export_embeddings,
    model_per_class_accuracy,
    write_distance_csv,
    write_embedding_csv,
    write_per_class_csv,
)
from .config import RunConfig, config_from_dict, load_config
from .datasets import DatasetSplit, generate_synthetic, load_dataset, save_dataset
from .errors import ConfigError, NumericalError
from .fusion import FusionModel
from .gradcheck import ALL_CONFIGS, TINY_BACKBONE, TINY_ENCODER, TINY_FUSION, config_for, model_gradcheck
from .nn import params_from_json, params_to_json
from .training import evaluate, train_loop

log = logging.getLogger("dynmlp")

CHECKPOINT_FILE = "checkpoint.json"
METRICS_FILE = "metrics.csv"
METRIC_FIELDS = ["epoch", "split", "top1", "top5", "mean_loss", "lr"]


def resolve_split(cfg: RunConfig, dataset_arg: str | None = None) -> DatasetSplit:
    if dataset_arg:
        split = load_dataset(dataset_arg)
    elif cfg.dataset.synthetic is not None:
        split = generate_synthetic(cfg.dataset.synthetic)
    elif cfg.dataset.path is not None:
        split = load_dataset(cfg.dataset.path)
    else:
        split = load_dataset(cfg.dataset.train_path, cfg.dataset.val_path)
    check_compatible(cfg, split)
    return split


def check_compatible(cfg: RunConfig, split: DatasetSplit) -> None:
    if split.feature_dim != cfg.encoder.input_dim:
        raise ConfigError("encoder.input_dim",
                          f"dimension mismatch: expected {cfg.encoder.input_dim}, found {split.feature_dim}")
    if split.num_classes > cfg.fusion.num_classes:
        raise ConfigError("fusion.num_classes",
                          f"class count mismatch: expected {cfg.fusion.num_classes}, found {split.num_classes}")


def build_model(cfg: RunConfig) -> FusionModel:
    return FusionModel(cfg.encoder, cfg.metadata_backbone, cfg.fusion, seed=cfg.seed)


def _set_precision(cfg: RunConfig) -> None:
    ag.set_default_dtype(np.float32 if cfg.training.precision == "float32" else np.float64)


def _dump(doc, path: Path) -> None:
    path.write_text(json.dumps(doc, indent=1) + "\n")


def write_checkpoint(path: Path, cfg: RunConfig, model: FusionModel, velocity, epochs_completed: int) -> None:
    names = [name for name, _ in model.named_parameters()]
    doc = {
        "config": cfg.to_dict(),
        "epochs_completed": epochs_completed,
        "parameters": params_to_json(model.state_dict()),
        "velocity": params_to_json(dict(zip(names, velocity))),
    }
    path.write_text(json.dumps(doc))


def read_checkpoint(path: str | Path) -> tuple[RunConfig, FusionModel, dict]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    doc = json.loads(path.read_text())
    cfg = config_from_dict(doc["config"])
    cfg.validate()
    _set_precision(cfg)
    model = build_model(cfg)
    model.load_state_dict(params_from_json(doc["parameters"]))
    return cfg, model, doc


def cmd_generate(args) -> int:
    cfg = load_config(args.config, args.set)
    spec = cfg.dataset.synthetic
    if spec is None:
        raise ConfigError("dataset.synthetic", "generate needs a synthetic dataset section")
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        print(f"refusing to overwrite non-empty {out}; pass --force", file=sys.stderr)
        return 1
    split = generate_synthetic(spec)
    save_dataset(split, out)
    manifest = {
        "seed": spec.seed,
        "num_classes": split.num_classes,
        "feature_dim": split.feature_dim,
        "train_size": len(split.train),
        "val_size": len(split.val),
        "split_hashes": {"train": split.fingerprint("train"), "val": split.fingerprint("val")},
        "spec": dataclasses.asdict(spec),
    }
    _dump(manifest, out / "manifest.json")
    print(f"wrote {len(split.train)} train / {len(split.val)} val examples to {out}")
    return 0


def cmd_train(args) -> int:
    overrides = list(args.set)
    if args.out:
        overrides.append(f"output_dir={json.dumps(args.out)}")
    cfg = load_config(args.config, overrides)
    _set_precision(cfg)
    split = resolve_split(cfg, args.dataset)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = build_model(cfg)
    start_epoch, velocity = 0, None
    if args.resume:
        _, resumed, doc = read_checkpoint(args.resume)
        model.load_state_dict(resumed.state_dict())
        start_epoch = int(doc["epochs_completed"])
        velocity = list(params_from_json(doc["velocity"]).values())
    _dump(cfg.to_dict(), out / "resolved_config.json")

    metrics_path = out / METRICS_FILE
    append = bool(args.resume) and metrics_path.exists()
    with open(metrics_path, "a" if append else "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        if not append:
            writer.writeheader()

        def on_epoch(rows, _opt):
            for row in rows:
                writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
            fh.flush()

        result = train_loop(model, split, cfg.training, start_epoch, velocity, on_epoch)
    write_checkpoint(out / CHECKPOINT_FILE, cfg, model, result.optimizer.velocity, result.epochs_completed)
    val_rows = [r for r in result.history if r["split"] == "val"]
    if val_rows:
        print(f"epoch {val_rows[-1]['epoch']}: val top1 {val_rows[-1]['top1']:.4f} top5 {val_rows[-1]['top5']:.4f}")
    print(f"checkpoint: {out / CHECKPOINT_FILE}")
    return 0


def _parse_ints(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise ConfigError("--topk", f"expected comma-separated integers, got {text!r}") from None


def cmd_eval(args) -> int:
    cfg, model, _ = read_checkpoint(args.checkpoint)
    split = resolve_split(cfg, args.dataset)
    k_list = _parse_ints(args.topk)
    metrics = evaluate(model, split.arrays(args.split), k_list, batch_size=cfg.training.eval_batch_size)
    doc = {"top1": metrics.top1, "top5": metrics.top5, "mean_loss": metrics.mean_loss}
    doc.update({f"top{k}": v for k, v in metrics.topk.items()})
    print(json.dumps(doc))
    return 0


def cmd_compare(args) -> int:
    cfg = load_config(args.config, args.set)
    _set_precision(cfg)
    split = resolve_split(cfg, args.dataset)
    strategies = [s.strip() for s in args.strategies.split(",") if s.strip()]
    report = compare_strategies(split, cfg.encoder, cfg.metadata_backbone, cfg.fusion, cfg.training,
                                strategies, seed=cfg.seed, equalize_params=args.equalize_params)
    report["config"] = cfg.to_dict()
    out = Path(args.out) if args.out else Path(cfg.output_dir) / "compare.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, indent=1) + "\n")
    for e in report["entries"]:
        if e["status"] == "ok":
            print(f"{e['strategy']:>16}  params {e['params']:>9}  top1 {e['top1']:.4f}  top5 {e['top5']:.4f}")
        else:
            print(f"{e['strategy']:>16}  FAILED: {e['error']}")
    print(f"report: {out}")
    return 0


def cmd_export(args) -> int:
    cfg, model, _ = read_checkpoint(args.checkpoint)
    split = resolve_split(cfg, args.dataset)
    data = split.arrays(args.split)
    out = Path(args.out) if args.out else Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.what == "embeddings":
        path = out / "embeddings.csv"
        write_embedding_csv(export_embeddings(model, data, args.tap), path)
    elif args.what == "distances":
        subset = _parse_ints(args.classes) if args.classes else None
        path = out / "distances.csv"
        write_distance_csv(classifier_weight_distances(model.classifier_weight(), subset), path)
    else:
        path = out / "per_class.csv"
        write_per_class_csv(model_per_class_accuracy(model, data), path)
    print(path)
    return 0


def cmd_gradcheck(args) -> int:
    if args.config:
        cfg = load_config(args.config, args.set)
        encoder, backbone, base = cfg.encoder, cfg.metadata_backbone, cfg.fusion
    else:
        encoder, backbone, base = TINY_ENCODER, TINY_BACKBONE, TINY_FUSION
    if base.d > 16:
        raise ConfigError("fusion.d", f"gradcheck needs d <= 16, got {base.d}")
    if args.all:
        labels = list(ALL_CONFIGS)
    else:
        strategy = args.strategy or base.strategy
        variant = args.variant or base.variant
        labels = [f"dynamic-{variant}" if strategy == "dynamic" else strategy]
    worst = 0.0
    for label in labels:
        err = model_gradcheck(encoder, backbone, config_for(label, base), batch=args.batch,
                              seed=args.seed, step=args.step)
        worst = max(worst, err)
        print(f"{label:>16}  max rel err {err:.3e}  {'PASS' if err <= args.tol else 'FAIL'}")
    print(f"{len(labels)} configuration(s), worst {worst:.3e}, tolerance {args.tol:g}")
    return 0 if worst <= args.tol else 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dynmlp", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p, required=True):
        p.add_argument("--config", required=required, help="run config JSON")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key by dotted path, e.g. fusion.h=32")

    p = sub.add_parser("generate", help="write a synthetic dataset")
    with_config(p)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train one model")
    with_config(p)
    p.add_argument("--out", help="output directory (overrides output_dir)")
    p.add_argument("--dataset", help="dataset directory (overrides the dataset section)")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset")
    p.add_argument("--split", choices=["train", "val"], default="val")
    p.add_argument("--topk", default="1,5")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="train and compare fusion strategies")
    with_config(p)
    p.add_argument("--strategies", default="image_only,concat,addition,multiplication,dynamic")
    p.add_argument("--equalize-params", action="store_true")
    p.add_argument("--dataset")
    p.add_argument("--out")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("export", help="export analysis tables")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset")
    p.add_argument("--what", choices=["embeddings", "distances", "per-class"], required=True)
    p.add_argument("--tap", choices=["pre_fusion", "post_fusion"], default="post_fusion")
    p.add_argument("--classes", help="comma-separated class subset for distances")
    p.add_argument("--split", choices=["train", "val"], default="val")
    p.add_argument("--out")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model")
    with_config(p, required=False)
    p.add_argument("--strategy")
    p.add_argument("--variant", choices=["A", "B", "C"])
    p.add_argument("--all", action="store_true", help="check all 7 strategy/variant configurations")
    p.add_argument("--batch", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get("DYNMLP_LOG_LEVEL", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    prev = ag.get_default_dtype()
    try:
        return args.func(args)
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, ValueError, KeyError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    finally:
        ag.set_default_dtype(prev)


if __name__ == "__main__":
    sys.exit(main())
