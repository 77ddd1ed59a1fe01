"""Experiment drivers: backbone training, attacks, ablations, defense, reports."""
from __future__ import annotations

import copy
import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .attack import (AttackObjective, AttackReport, PatchTrainingConfig, evaluate_attack,
                     train_patch)
from .config import ModelConfig
from .data import DatasetSpec, load_dataset
from .defense import DefenseConfig, adversarial_train
from .exceptions import ConfigError
from .flops import attack_success, static_flops
from .patch import check_bounds, save_patch
from .training import TrainConfig, train_model
from .validation import check_images, check_labels, derive_seed
from .vit import AdaptiveViT

log = logging.getLogger(__name__)

REPORT_COLUMNS = ("method", "attack", "model GFLOPs", "top-1", "attack success")


@dataclass
class AttackSettings:
    objective: str = "compute_only"
    task_weight: float = 1.0
    target_class: int | None = None
    tap_targets: int = 10
    patch_size: int = 8
    location: tuple[int, int] = (0, 0)
    lr: float = 0.2
    weight_decay: float = 0.0
    batch_size: int = 128
    iterations: int = 500
    restarts: int = 4

    def __post_init__(self):
        self.location = tuple(int(v) for v in self.location)

    def objective_record(self, target_class=None) -> AttackObjective:
        tc = self.target_class if target_class is None else target_class
        return AttackObjective(self.objective, self.task_weight, tc)

    def optimizer(self, seed: int) -> PatchTrainingConfig:
        return PatchTrainingConfig(lr=self.lr, weight_decay=self.weight_decay,
                                   batch_size=self.batch_size, iterations=self.iterations,
                                   restarts=self.restarts, seed=seed)


@dataclass
class ExperimentConfig:
    """Everything one run needs. ``seed`` is mandatory.

    ``model`` is either an inline ModelConfig dict or a path to its JSON.
    """

    seed: int
    output_dir: str = "runs/default"
    model: dict | str = field(default_factory=lambda: ModelConfig(adaptive_policy="avit").to_dict())
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    attack: AttackSettings = field(default_factory=AttackSettings)
    defense: DefenseConfig = field(default_factory=DefenseConfig)
    checkpoint: str | None = None

    def __post_init__(self):
        if self.seed is None:
            raise ConfigError("experiment seed is mandatory")
        self.seed = int(self.seed)
        if isinstance(self.dataset, dict):
            self.dataset = DatasetSpec(**self.dataset)
        if isinstance(self.train, dict):
            self.train = TrainConfig(**self.train)
        if isinstance(self.attack, dict):
            self.attack = AttackSettings(**self.attack)
        if isinstance(self.defense, dict):
            self.defense = DefenseConfig(**self.defense)
        if isinstance(self.model, str) and not Path(self.model).exists():
            raise ConfigError(f"model config {self.model} does not exist")
        if self.dataset.root is not None and not Path(self.dataset.root).exists():
            raise ConfigError(f"dataset root {self.dataset.root} does not exist")

    @property
    def model_config(self) -> ModelConfig:
        if isinstance(self.model, str):
            return ModelConfig.from_json(Path(self.model))
        return ModelConfig.from_dict(dict(self.model))

    @property
    def checkpoint_path(self) -> Path:
        return Path(self.checkpoint) if self.checkpoint else Path(self.output_dir) / "backbone.pt"

    def to_dict(self) -> dict:
        d = {}
        for f in fields(self):
            v = getattr(self, f.name)
            d[f.name] = asdict(v) if hasattr(v, "__dataclass_fields__") else v
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if "seed" not in d:
            raise ConfigError("experiment seed is mandatory")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown experiment fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def prepare_data(cfg: ExperimentConfig):
    x_tr, y_tr, x_ev, y_ev = load_dataset(cfg.dataset)
    return (check_images(x_tr), check_labels(y_tr), check_images(x_ev), check_labels(y_ev))


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, default=_jsonable))
    return path


def _jsonable(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if hasattr(o, "__dataclass_fields__"):
        return asdict(o)
    return str(o)


def train_backbone(cfg: ExperimentConfig, data=None):
    """Train the configured efficient model from scratch and checkpoint it.

    Token sampling wraps a plainly trained backbone, so ``ats`` trains with
    policy ``none`` and switches sampling on afterwards.
    """
    x_tr, y_tr, x_ev, y_ev = data if data is not None else prepare_data(cfg)
    mc = cfg.model_config
    torch.manual_seed(derive_seed(cfg.seed, "init"))
    train_mc = mc.with_policy("none") if mc.adaptive_policy == "ats" else mc
    model = AdaptiveViT(train_mc)
    tc = TrainConfig(**{**cfg.train.to_dict(), "seed": derive_seed(cfg.seed, "train")})
    history = train_model(model, x_tr, y_tr, tc)
    if mc.adaptive_policy == "ats":
        model = model.with_policy("ats", mc.policy_params)
    report = evaluate_attack(model, None, x_ev, y_ev, label="no attack")
    metrics = {"history": history, "eval_accuracy": report.acc_clean,
               "eval_mean_flops": report.flops_clean, "max_flops": report.flops_max,
               "checksum": model.checksum()}
    model.save(cfg.checkpoint_path)
    _write_json(Path(cfg.output_dir) / "backbone_metrics.json", metrics)
    return model, metrics


def load_backbone(cfg: ExperimentConfig) -> AdaptiveViT:
    path = cfg.checkpoint_path
    if not path.exists():
        raise FileNotFoundError(f"backbone checkpoint {path} not found; run train-backbone")
    return AdaptiveViT.load(path)


def _attack_once(model, cfg, settings: AttackSettings, data, seed, target_class=None,
                 label=None, save_to: Path | None = None):
    x_tr, y_tr, x_ev, y_ev = data
    objective = settings.objective_record(target_class)
    check_bounds(settings.patch_size, settings.location, model.config.image_size)
    patch, history = train_patch(model, x_tr, y_tr, objective, settings.patch_size,
                                 settings.location, settings.optimizer(seed))
    report = evaluate_attack(model, patch, x_ev, y_ev, label=label or settings.objective)
    report.method = model.policy
    if save_to is not None:
        save_patch(patch, save_to, objective=asdict(objective), seed=seed,
                   model_checksum=model.checksum(), iterations=settings.iterations)
        _write_json(save_to.with_name(save_to.name + "_history.json"), history)
    return patch, report


def _average_reports(reports: list[AttackReport], label: str) -> AttackReport:
    first = reports[0]
    flops = float(np.mean([r.flops_attack for r in reports]))
    acc = float(np.mean([r.acc_attack for r in reports]))
    success = (attack_success(flops, first.flops_clean, first.flops_max)
               if first.flops_max > first.flops_clean else None)
    return AttackReport(label, flops, first.flops_clean, first.flops_max, acc, first.acc_clean,
                        success, {}, first.n_images, method=first.method)


def run_attack(cfg: ExperimentConfig, model=None, data=None, settings: AttackSettings | None = None,
               tag: str | None = None, label: str | None = None) -> AttackReport:
    """Train and evaluate a patch for ``settings`` (the config's by default).

    Targeted patches are trained for ``tap_targets`` random target classes
    and their metrics averaged.
    """
    model = model if model is not None else load_backbone(cfg)
    data = data if data is not None else prepare_data(cfg)
    settings = settings or cfg.attack
    out = Path(cfg.output_dir) / "patches"
    tag = tag or f"{settings.objective}_p{settings.patch_size}_r{settings.location[0]}c{settings.location[1]}"
    seed = derive_seed(cfg.seed, "attack", tag)
    if settings.objective == "tap" and settings.target_class is None:
        rng = np.random.default_rng(derive_seed(cfg.seed, "tap-targets"))
        targets = rng.integers(0, model.config.num_classes, size=settings.tap_targets)
        reports = [_attack_once(model, cfg, settings, data, derive_seed(seed, i), int(t),
                                label="tap", save_to=out / f"{tag}_t{i}")[1]
                   for i, t in enumerate(targets)]
        report = _average_reports(reports, "tap")
    else:
        _, report = _attack_once(model, cfg, settings, data, seed, save_to=out / tag)
    if label:
        report.label = label
    _write_json(Path(cfg.output_dir) / "reports" / f"{tag}.json", report.to_dict())
    return report


def no_attack_report(model, data) -> AttackReport:
    report = evaluate_attack(model, None, data[2], data[3], label="no attack")
    report.method = model.policy
    report.attack_success = None
    return report


def run_baselines(cfg: ExperimentConfig, model=None, data=None,
                  kinds=("random", "tap", "ntap", "compute_only")) -> list[AttackReport]:
    """No-attack row plus one row per attack kind, sharing one backbone."""
    model = model if model is not None else load_backbone(cfg)
    data = data if data is not None else prepare_data(cfg)
    rows = [no_attack_report(model, data)]
    for kind in kinds:
        settings = AttackSettings(**{**asdict(cfg.attack), "objective": kind})
        rows.append(run_attack(cfg, model, data, settings))
    return rows


def ablate_size(cfg: ExperimentConfig, sizes=(4, 8, 12, 16), model=None, data=None):
    model = model if model is not None else load_backbone(cfg)
    data = data if data is not None else prepare_data(cfg)
    rows = []
    for size in sizes:
        settings = AttackSettings(**{**asdict(cfg.attack), "patch_size": int(size)})
        label = f"{size} ({size**2 / model.config.image_size**2:.0%})"
        report = run_attack(cfg, model, data, settings, label=label)
        rows.append(report)
    return rows


def ablate_location(cfg: ExperimentConfig, n_locations: int = 5, model=None, data=None):
    """Attacks at ``n_locations`` random patch positions."""
    model = model if model is not None else load_backbone(cfg)
    data = data if data is not None else prepare_data(cfg)
    rng = np.random.default_rng(derive_seed(cfg.seed, "locations"))
    limit = model.config.image_size - cfg.attack.patch_size
    rows = []
    for _ in range(n_locations):
        loc = tuple(int(v) for v in rng.integers(0, limit + 1, size=2))
        settings = AttackSettings(**{**asdict(cfg.attack), "location": loc})
        report = run_attack(cfg, model, data, settings, label=f"at {loc}")
        rows.append(report)
    return rows


def run_defense(cfg: ExperimentConfig, model=None, data=None):
    """Adversarially train a copy of the backbone, then re-attack it.

    Returns ``(defended_model, rows)`` with rows: no attack, attack on the
    undefended model, and a fresh equal-budget attack on the defended one.
    Success of the last row is measured against the undefended model's
    clean FLOPs; its own clean FLOPs are reported alongside.
    """
    model = model if model is not None else load_backbone(cfg)
    data = data if data is not None else prepare_data(cfg)
    x_tr, y_tr, x_ev, y_ev = data
    settings = AttackSettings(**{**asdict(cfg.attack), "iterations": cfg.defense.budget_iterations})
    baseline = no_attack_report(model, data)
    attacked = run_attack(cfg, model, data, settings, tag="defense_undefended")
    defended = copy.deepcopy(model)
    tc = TrainConfig(**{**cfg.train.to_dict(), "lr": cfg.train.lr * 0.25,
                        "seed": derive_seed(cfg.seed, "defense-train")})
    dc = DefenseConfig(**{**cfg.defense.to_dict(), "seed": derive_seed(cfg.seed, "defense")})
    defended, pool, history = adversarial_train(
        defended, x_tr, y_tr, settings.objective_record(), settings.patch_size,
        settings.location, dc, tc)
    defended.save(Path(cfg.output_dir) / "defended.pt")
    pool.save(Path(cfg.output_dir) / "pool")
    fresh = run_attack(cfg, defended, data, settings, tag="defense_defended",
                       label="defense + attack")
    fresh.extra = {"defended_clean_flops": fresh.flops_clean,
                   "success_vs_own_clean": fresh.attack_success}
    fresh.attack_success = (attack_success(fresh.flops_attack, baseline.flops_attack,
                                           baseline.flops_max)
                            if baseline.flops_max > baseline.flops_attack else None)
    _write_json(Path(cfg.output_dir) / "reports" / "defense_defended.json", fresh.to_dict())
    rows = [baseline, attacked, fresh]
    _write_json(Path(cfg.output_dir) / "defense_history.json", history)
    return defended, rows


def format_percent(value) -> str:
    """Whole percent with a plain minus sign, ``-`` when there is no value."""
    if value is None or (isinstance(value, float) and np.isnan(value)):
        return "-"
    return f"{round(100 * value) + 0:d}%"


def report_rows(reports: list[AttackReport]) -> list[dict]:
    """Table rows with an architecture row on top, as in a results table."""
    rows = []
    if reports:
        rows.append({"method": reports[0].method, "attack": "max (no adaptivity)",
                     "model GFLOPs": reports[0].flops_max / 1e9, "top-1": None,
                     "attack success": None})
    for r in reports:
        rows.append({"method": r.method, "attack": r.label, "model GFLOPs": r.flops_attack / 1e9,
                     "top-1": r.acc_attack, "attack success": r.attack_success})
    return rows


def emit_report(reports: list[AttackReport], out_dir, name: str = "report") -> dict[str, Path]:
    """Write ``name``.csv, ``name``.md and ``name``_plot.json."""
    if not reports:
        raise ConfigError("nothing to report")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = report_rows(reports)
    csv_path = out_dir / f"{name}.csv"
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(REPORT_COLUMNS)
        for r in rows:
            w.writerow([r["method"], r["attack"], f"{r['model GFLOPs']:.9f}",
                        "" if r["top-1"] is None else f"{r['top-1']:.4f}",
                        "" if r["attack success"] is None else f"{r['attack success']:.6f}"])
    md = ["| " + " | ".join(REPORT_COLUMNS) + " |", "|" + "---|" * len(REPORT_COLUMNS)]
    for r in rows:
        md.append("| " + " | ".join([
            str(r["method"]), str(r["attack"]), f"{r['model GFLOPs']:.4f}",
            format_percent(r["top-1"]) if r["top-1"] is not None else "-",
            format_percent(r["attack success"])]) + " |")
    md_path = out_dir / f"{name}.md"
    md_path.write_text("\n".join(md) + "\n")
    plot_path = _write_json(out_dir / f"{name}_plot.json", [r.to_dict() for r in reports])
    return {"csv": csv_path, "markdown": md_path, "plot": plot_path}


def read_report_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    for r in rows:
        r["model GFLOPs"] = float(r["model GFLOPs"])
        r["top-1"] = float(r["top-1"]) if r["top-1"] else None
        r["attack success"] = float(r["attack success"]) if r["attack success"] else None
    return rows


def load_reports(paths) -> list[AttackReport]:
    out = []
    for p in paths:
        d = json.loads(Path(p).read_text())
        for item in d if isinstance(d, list) else [d]:
            out.append(AttackReport(**item))
    return out


__all__ = [
    "AttackSettings", "ExperimentConfig", "prepare_data", "train_backbone", "load_backbone",
    "run_attack", "run_baselines", "ablate_size", "ablate_location", "run_defense",
    "emit_report", "read_report_csv", "load_reports", "no_attack_report", "static_flops",
]
