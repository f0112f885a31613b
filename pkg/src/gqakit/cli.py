"""Command line front end.

Subcommands: train, convert, finetune, eval, cost, compare-metrics.
Every run that writes files also writes a manifest.json recording the
command, arguments, the full resolved config, and content hashes of
inputs and outputs, so a run can be repeated and checked byte for byte.

Exit codes: 2 for configuration or argument problems, 3 for unreadable
or malformed checkpoints, 4 for search or training failures.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys

import numpy as np

import gqakit
from gqakit.costmodel import cost_curve, save_cost_csv
from gqakit.errors import (BudgetError, CheckpointError, ConfigError,
                           GroupingError, InputError, OracleError, PlanError,
                           TrainingError)
from gqakit.grouping import SearchConfig
from gqakit.merge import STRATEGIES, group_and_convert
from gqakit.model import (ModelConfig, init_model, load_checkpoint,
                          save_checkpoint)
from gqakit.numerics import derive_seed
from gqakit.tasks import (Dataset, TaskSpec, TrainConfig, calibration_batch,
                          evaluate, gen_dataset, make_evaluator,
                          save_history_csv, train)

CONFIG_VERSION = 1
MANIFEST_VERSION = 1

CONFIG_EXIT = 2
CHECKPOINT_EXIT = 3
SEARCH_EXIT = 4


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def load_config(path: str) -> dict:
    try:
        with open(path) as f:
            doc = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    if doc.get("config_version") != CONFIG_VERSION:
        raise ConfigError(
            f"unsupported config_version {doc.get('config_version')!r}")
    for section in ("model", "task", "data", "train"):
        if section not in doc:
            raise ConfigError(f"config missing {section!r} section")
    model_cfg = ModelConfig.from_dict(doc["model"])
    task_spec = TaskSpec.from_dict(doc["task"])
    if task_spec.vocab_size != model_cfg.vocab_size:
        raise ConfigError("task vocab_size disagrees with model vocab_size")
    if task_spec.n_classes != model_cfg.n_classes:
        raise ConfigError("task n_classes disagrees with model n_classes")
    if task_spec.seq_len > model_cfg.max_seq_len:
        raise ConfigError("task seq_len exceeds model max_seq_len")
    return doc


def _model_config(doc: dict) -> ModelConfig:
    return ModelConfig.from_dict(doc["model"])


def _datasets(doc: dict) -> tuple[Dataset, Dataset]:
    spec = TaskSpec.from_dict(doc["task"])
    data = doc["data"]
    seed = int(data.get("seed", 0))
    train_set = gen_dataset(spec, int(data["n_train"]), derive_seed(seed, "train"))
    val_set = gen_dataset(spec, int(data["n_val"]), derive_seed(seed, "val"))
    return train_set, val_set


def _train_config(doc: dict, epochs: int | None = None,
                  seed: int | None = None) -> TrainConfig:
    t = doc["train"]
    cfg = TrainConfig(
        epochs=int(t["epochs"]) if epochs is None else epochs,
        batch_size=int(t.get("batch_size", 64)),
        lr=float(t.get("lr", 1e-3)),
        weight_decay=float(t.get("weight_decay", 0.01)),
        seed=int(t.get("seed", 0)) if seed is None else seed)
    cfg.validate()
    return cfg


def write_manifest(path: str, command: str, argv: list[str], config: dict,
                   inputs: dict[str, str], outputs: list[str]) -> str:
    manifest = {
        "manifest_version": MANIFEST_VERSION,
        "package_version": gqakit.__version__,
        "command": command,
        "argv": argv,
        "config": config,
        "inputs": {name: _sha256(p) for name, p in inputs.items()},
        "outputs": {os.path.basename(p): _sha256(p) for p in outputs},
    }
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    return path


def _sibling_manifest(out_path: str) -> str:
    return os.path.splitext(out_path)[0] + ".manifest.json"


def _ensure_out_dir(path: str) -> None:
    os.makedirs(path, exist_ok=True)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_train(args, argv) -> int:
    doc = load_config(args.config)
    _ensure_out_dir(args.out_dir)
    train_set, val_set = _datasets(doc)
    tcfg = _train_config(doc, seed=args.seed)
    ckpt = init_model(_model_config(doc), derive_seed(tcfg.seed, "init"))
    result = train(ckpt, train_set, val_set, tcfg)
    ckpt_path = os.path.join(args.out_dir, "checkpoint.json")
    hist_path = os.path.join(args.out_dir, "history.csv")
    save_checkpoint(result.checkpoint, ckpt_path)
    save_history_csv(result.history, hist_path)
    write_manifest(os.path.join(args.out_dir, "manifest.json"), "train", argv, doc,
                   inputs={}, outputs=[ckpt_path, hist_path])
    print(f"final val accuracy {result.final_val_acc:.4f} "
          f"after {tcfg.epochs} epochs; wrote {ckpt_path}")
    return 0


def _search_config(args) -> SearchConfig:
    cfg = SearchConfig(group_size=args.group_size, n_iters=args.iters,
                       top_k=args.topk, p_acc=args.p_acc, p_reset=args.p_reset,
                       p_preserve=args.p_preserve, seed=args.seed)
    cfg.validate()
    return cfg


def cmd_convert(args, argv) -> int:
    doc = load_config(args.config)
    ckpt = load_checkpoint(args.checkpoint)
    _ensure_out_dir(args.out_dir)
    train_set, val_set = _datasets(doc)
    calib_cfg = doc.get("calibration", {})
    calib = calibration_batch(train_set,
                              int(calib_cfg.get("n_sequences", 8)),
                              int(calib_cfg.get("seed", 0)))
    oracle = make_evaluator(val_set)
    search_cfg = None
    if args.strategy in ("symmetric", "asymmetric"):
        search_cfg = _search_config(args)
    converted, report = group_and_convert(
        ckpt, args.group_size, args.strategy, calibration_batch=calib,
        evaluate=oracle, metric=args.metric, search_cfg=search_cfg)
    out_ckpt = os.path.join(args.out_dir, "converted.json")
    out_report = os.path.join(args.out_dir, "report.json")
    save_checkpoint(converted, out_ckpt)
    with open(out_report, "w") as f:
        json.dump(report.to_dict(), f, indent=2, sort_keys=True)
    write_manifest(os.path.join(args.out_dir, "manifest.json"), "convert", argv, doc,
                   inputs={"checkpoint": args.checkpoint},
                   outputs=[out_ckpt, out_report])
    acc = oracle(converted)
    saved = report.attn_params_before - report.attn_params_after
    print(f"strategy {args.strategy}, group size {args.group_size}: "
          f"oracle accuracy {acc:.4f}, "
          f"attention params {report.attn_params_before} -> "
          f"{report.attn_params_after} (saved {saved})")
    return 0


def cmd_finetune(args, argv) -> int:
    doc = load_config(args.config)
    ckpt = load_checkpoint(args.checkpoint)
    _ensure_out_dir(args.out_dir)
    train_set, val_set = _datasets(doc)
    tcfg = _train_config(doc, epochs=args.epochs, seed=args.seed)
    result = train(ckpt, train_set, val_set, tcfg)
    out_ckpt = os.path.join(args.out_dir, "finetuned.json")
    hist_path = os.path.join(args.out_dir, "history.csv")
    save_checkpoint(result.checkpoint, out_ckpt)
    save_history_csv(result.history, hist_path)
    write_manifest(os.path.join(args.out_dir, "manifest.json"), "finetune", argv, doc,
                   inputs={"checkpoint": args.checkpoint},
                   outputs=[out_ckpt, hist_path])
    print(f"final val accuracy {result.final_val_acc:.4f} "
          f"after {tcfg.epochs} epochs; wrote {out_ckpt}")
    return 0


def cmd_eval(args, argv) -> int:
    doc = load_config(args.config)
    ckpt = load_checkpoint(args.checkpoint)
    train_set, val_set = _datasets(doc)
    dataset = val_set if args.split == "val" else train_set
    acc = evaluate(ckpt, dataset)
    print(f"{args.split} accuracy {acc:.4f} over {len(dataset)} examples")
    if args.out is not None:
        with open(args.out, "w") as f:
            json.dump({"split": args.split, "accuracy": acc,
                       "n_examples": len(dataset)}, f, sort_keys=True)
        write_manifest(_sibling_manifest(args.out), "eval", argv, doc,
                       inputs={"checkpoint": args.checkpoint},
                       outputs=[args.out])
    return 0


def cmd_cost(args, argv) -> int:
    sizes = None
    if args.sizes is not None:
        sizes = [int(s) for s in args.sizes.split(",") if s]
    report = cost_curve(args.d_model, args.n_heads, args.head_dim,
                        args.seq_len, n_layers=args.n_layers, group_sizes=sizes)
    print(f"{'group':>6} {'kv_groups':>10} {'params':>12} "
          f"{'flops/token':>12} {'rel_params':>11} {'rel_flops':>10}")
    for r in report.rows:
        print(f"{r.group_size:>6} {r.n_kv_groups:>10} {r.attn_params:>12} "
              f"{r.attn_flops_per_token:>12} {r.relative_params:>11.4f} "
              f"{r.relative_flops:>10.4f}")
    if args.out is not None:
        save_cost_csv(report, args.out)
        flags = {"d_model": args.d_model, "n_heads": args.n_heads,
                 "head_dim": args.head_dim, "seq_len": args.seq_len,
                 "n_layers": args.n_layers, "sizes": sizes}
        write_manifest(_sibling_manifest(args.out), "cost", argv, flags,
                       inputs={}, outputs=[args.out])
        print(f"wrote {args.out}")
    return 0


def cmd_compare_metrics(args, argv) -> int:
    doc = load_config(args.config)
    base = load_checkpoint(args.checkpoint)
    _ensure_out_dir(args.out_dir)
    train_set, val_set = _datasets(doc)
    calib_cfg = doc.get("calibration", {})
    calib = calibration_batch(train_set,
                              int(calib_cfg.get("n_sequences", 8)),
                              int(calib_cfg.get("seed", 0)))
    oracle = make_evaluator(val_set)
    sizes = [int(s) for s in args.sizes.split(",") if s]
    seeds = list(range(args.seeds))
    rows = []
    for size in sizes:
        accs = {"weight": [], "activation": []}
        for seed in seeds:
            for metric in ("weight", "activation"):
                scfg = SearchConfig(group_size=size, n_iters=args.iters,
                                    top_k=args.topk, seed=seed)
                converted, _ = group_and_convert(
                    base, size, "symmetric", calibration_batch=calib,
                    evaluate=oracle, metric=metric, search_cfg=scfg)
                accs[metric].append(oracle(converted))
        # exhaustive search has no random state, so one run serves all seeds
        brute_ckpt, _ = group_and_convert(base, size, "brute", evaluate=oracle)
        brute_acc = oracle(brute_ckpt)
        for metric in ("weight", "activation"):
            vals = np.asarray(accs[metric])
            rows.append((size, f"search_{metric}", len(seeds),
                         float(vals.mean()), float(vals.std())))
        rows.append((size, "brute_force", len(seeds), brute_acc, 0.0))
    out_csv = os.path.join(args.out_dir, "comparison.csv")
    with open(out_csv, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["group_size", "method", "n_seeds", "mean_acc", "std_acc"])
        for row in rows:
            w.writerow([row[0], row[1], row[2], repr(row[3]), repr(row[4])])
    write_manifest(os.path.join(args.out_dir, "manifest.json"), "compare-metrics", argv, doc,
                   inputs={"checkpoint": args.checkpoint}, outputs=[out_csv])
    for size, method, _, mean, std in rows:
        print(f"group size {size:>2} {method:<18} {mean:.4f} +/- {std:.4f}")
    print(f"wrote {out_csv}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _add_search_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--iters", type=int, default=10,
                   help="search iterations per layer and projection")
    p.add_argument("--topk", type=int, default=3,
                   help="candidate pool size from the similarity ranking")
    p.add_argument("--p-acc", type=float, default=0.1,
                   help="chance of keeping a non-improving candidate")
    p.add_argument("--p-reset", type=float, default=0.1,
                   help="chance of restarting from a random grouping")
    p.add_argument("--p-preserve", type=float, default=0.2,
                   help="chance an asymmetric move keeps group sizes")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gqakit",
        description="Convert a toy multi-head transformer to grouped attention.")
    parser.add_argument("--version", action="version",
                        version=f"gqakit {gqakit.__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a fresh multi-head model")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=None,
                   help="override the training seed from the config")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("convert", help="choose head groups and merge them")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--strategy", required=True, choices=STRATEGIES)
    p.add_argument("--group-size", type=int, required=True)
    p.add_argument("--metric", default="activation",
                   choices=("activation", "weight"))
    p.add_argument("--seed", type=int, default=0)
    _add_search_flags(p)
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("finetune", help="recovery training after conversion")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="accuracy of a checkpoint on a split")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="val", choices=("train", "val"))
    p.add_argument("--out", default=None, help="optional JSON result path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("cost", help="analytic parameter and FLOP table")
    p.add_argument("--d-model", type=int, required=True)
    p.add_argument("--n-heads", type=int, required=True)
    p.add_argument("--head-dim", type=int, required=True)
    p.add_argument("--seq-len", type=int, required=True)
    p.add_argument("--n-layers", type=int, default=1)
    p.add_argument("--sizes", default=None,
                   help="comma-separated group sizes (default: all divisors)")
    p.add_argument("--out", default=None, help="optional CSV path")
    p.set_defaults(func=cmd_cost)

    p = sub.add_parser("compare-metrics",
                       help="search guided by weight vs activation similarity, "
                            "against exhaustive search")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--sizes", default="1,2,4")
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--iters", type=int, default=10)
    p.add_argument("--topk", type=int, default=3)
    p.set_defaults(func=cmd_compare_metrics)

    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args, argv)
    except (ConfigError, InputError, GroupingError, PlanError) as e:
        print(f"error: {e}", file=sys.stderr)
        return CONFIG_EXIT
    except CheckpointError as e:
        print(f"checkpoint error: {e}", file=sys.stderr)
        return CHECKPOINT_EXIT
    except (BudgetError, OracleError, TrainingError) as e:
        print(f"run failed: {e}", file=sys.stderr)
        return SEARCH_EXIT


if __name__ == "__main__":
    sys.exit(main())
