"""Command line entry point.

Every subcommand reads an optional JSON experiment config and lets flags
override its fields. The dataset root may also come from the
``ENERGYPATCH_DATA_ROOT`` environment variable.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import experiments as ex
from .attack import evaluate_attack
from .exceptions import ConfigError
from .patch import load_patch


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config JSON")
    common.add_argument("--seed", type=int)
    common.add_argument("--output-dir")
    common.add_argument("--checkpoint", help="backbone checkpoint path")
    common.add_argument("--model-config", help="ModelConfig JSON path")
    common.add_argument("--policy", choices=["none", "avit", "ats", "adavit"])
    common.add_argument("--dataset", choices=["cifar10", "synthetic"], dest="source")
    common.add_argument("--data-root")
    common.add_argument("--train-count", type=int)
    common.add_argument("--eval-count", type=int)
    common.add_argument("--epochs", type=int)
    common.add_argument("--batch-size", type=int)
    common.add_argument("--lr", type=float)
    common.add_argument("--objective",
                        choices=["compute_only", "preserve_acc", "destroy_acc", "tap", "ntap",
                                 "random"])
    common.add_argument("--task-weight", type=float)
    common.add_argument("--target-class", type=int)
    common.add_argument("--patch-size", type=int)
    common.add_argument("--location", type=int, nargs=2, metavar=("ROW", "COL"))
    common.add_argument("--patch-lr", type=float)
    common.add_argument("--iterations", type=int)
    common.add_argument("--restarts", type=int, help="random starts probed per patch")
    common.add_argument("--budget-iterations", type=int)
    common.add_argument("--refreshes-per-epoch", type=int)
    common.add_argument("--defense-epochs", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="energypatch",
                                description="Compute-increasing patch attacks on adaptive ViTs")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("train-backbone", parents=[common], help="train and checkpoint a model")
    sub.add_parser("train-patch", parents=[common], help="optimize one universal patch")
    ev = sub.add_parser("evaluate", parents=[common], help="evaluate a saved patch")
    ev.add_argument("--patch", help="patch PNG; omit for the clean model")
    ab = sub.add_parser("ablate-size", parents=[common], help="attack success vs patch size")
    ab.add_argument("--sizes", type=int, nargs="+", default=[4, 8, 12, 16])
    al = sub.add_parser("ablate-location", parents=[common], help="random patch locations")
    al.add_argument("--n-locations", type=int, default=5)
    sub.add_parser("defend", parents=[common], help="adversarial training plus re-attack")
    rp = sub.add_parser("report", parents=[common], help="tabulate saved report JSON files")
    rp.add_argument("reports", nargs="+")
    rp.add_argument("--name", default="report")
    return p


def build_config(args) -> ex.ExperimentConfig:
    d = json.loads(Path(args.config).read_text()) if args.config else {}
    for section in ("dataset", "train", "attack", "defense"):
        d.setdefault(section, {})
    if args.seed is not None:
        d["seed"] = args.seed
    if args.output_dir:
        d["output_dir"] = args.output_dir
    if args.checkpoint:
        d["checkpoint"] = args.checkpoint
    if args.model_config:
        d["model"] = args.model_config
    if args.policy:
        model = ex.ExperimentConfig(seed=0, model=d.get("model", ex.ExperimentConfig(seed=0).model))
        d["model"] = model.model_config.with_policy(args.policy).to_dict()
    overrides = {
        "dataset": {"source": args.source, "root": args.data_root,
                    "train_count": args.train_count, "eval_count": args.eval_count},
        "train": {"epochs": args.epochs, "batch_size": args.batch_size, "lr": args.lr},
        "attack": {"objective": args.objective, "task_weight": args.task_weight,
                   "target_class": args.target_class, "patch_size": args.patch_size,
                   "location": args.location, "lr": args.patch_lr,
                   "iterations": args.iterations, "restarts": args.restarts},
        "defense": {"budget_iterations": args.budget_iterations,
                    "refreshes_per_epoch": args.refreshes_per_epoch,
                    "epochs": args.defense_epochs, "patch_lr": args.patch_lr},
    }
    for section, values in overrides.items():
        d[section].update({k: v for k, v in values.items() if v is not None})
    return ex.ExperimentConfig.from_dict(d)


def _print_table(paths):
    print(Path(paths["markdown"]).read_text(), end="")
    for kind, path in paths.items():
        print(f"{kind}: {path}")


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        if args.command == "report":
            reports = ex.load_reports(args.reports)
            out = args.output_dir or str(Path(args.reports[0]).parent)
            _print_table(ex.emit_report(reports, out, args.name))
            return 0
        cfg = build_config(args)
        out = Path(cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "experiment.json").write_text(json.dumps(cfg.to_dict(), indent=2))
        if args.command == "train-backbone":
            _, metrics = ex.train_backbone(cfg)
            print(f"checkpoint: {cfg.checkpoint_path}")
            print(f"eval accuracy {metrics['eval_accuracy']:.4f}, "
                  f"mean FLOPs {metrics['eval_mean_flops']:.4g} of {metrics['max_flops']:.4g}")
        elif args.command == "train-patch":
            model, data = ex.load_backbone(cfg), ex.prepare_data(cfg)
            rows = [ex.no_attack_report(model, data), ex.run_attack(cfg, model, data)]
            _print_table(ex.emit_report(rows, out, f"attack_{cfg.attack.objective}"))
        elif args.command == "evaluate":
            model, data = ex.load_backbone(cfg), ex.prepare_data(cfg)
            rows = [ex.no_attack_report(model, data)]
            if args.patch:
                rep = evaluate_attack(model, load_patch(args.patch), data[2], data[3],
                                      label=Path(args.patch).stem)
                rep.method = model.policy
                rows.append(rep)
            _print_table(ex.emit_report(rows, out, "evaluate"))
        elif args.command == "ablate-size":
            model, data = ex.load_backbone(cfg), ex.prepare_data(cfg)
            rows = ex.ablate_size(cfg, args.sizes, model, data)
            _print_table(ex.emit_report([ex.no_attack_report(model, data)] + rows, out,
                                        "ablate_size"))
        elif args.command == "ablate-location":
            model, data = ex.load_backbone(cfg), ex.prepare_data(cfg)
            rows = ex.ablate_location(cfg, args.n_locations, model, data)
            _print_table(ex.emit_report([ex.no_attack_report(model, data)] + rows, out,
                                        "ablate_location"))
        elif args.command == "defend":
            _, rows = ex.run_defense(cfg)
            _print_table(ex.emit_report(rows, out, "defense"))
    except (ConfigError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
