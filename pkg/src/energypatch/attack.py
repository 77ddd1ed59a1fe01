"""Universal patch attacks: objectives, patch optimization and evaluation."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from . import adavit, ats, avit
from .exceptions import ConfigError, ContractError, NonFiniteLossError
from .flops import attack_success, static_flops, trace_flops
from .patch import Patch, init_patch, project_quantize
from .validation import derive_seed
from .vit import AdaptiveViT, ComputeTrace

log = logging.getLogger(__name__)

OBJECTIVES = ("compute_only", "preserve_acc", "destroy_acc", "tap", "ntap", "random")


@dataclass
class AttackObjective:
    kind: str = "compute_only"
    task_weight: float = 1.0
    target_class: int | None = None

    def __post_init__(self):
        if self.kind not in OBJECTIVES:
            raise ConfigError(f"unknown objective {self.kind!r}")
        if self.task_weight < 0:
            raise ConfigError("task_weight must be non-negative")

    @property
    def optimizes(self) -> bool:
        return self.kind != "random"


def policy_attack_loss(model: AdaptiveViT, trace: ComputeTrace) -> torch.Tensor:
    """The compute-maximizing loss of ``model``'s adaptive policy."""
    params = model.config.policy_params
    if trace.policy != model.policy:
        raise ContractError(f"trace from policy {trace.policy}, model runs {model.policy}")
    if model.policy == "avit":
        return avit.avit_attack_loss(trace.halting, params)
    if model.policy == "ats":
        return ats.ats_attack_loss(trace, params)
    if model.policy == "adavit":
        return adavit.adavit_attack_loss(trace.keep_masks)
    raise ContractError("a model without an adaptive policy has no compute to attack")


def attack_loss(objective: AttackObjective, model: AdaptiveViT, logits: torch.Tensor,
                trace: ComputeTrace, labels: torch.Tensor | None = None) -> torch.Tensor:
    kind = objective.kind
    if kind == "random":
        raise ContractError("the random baseline is not optimized")
    if kind == "tap":
        if objective.target_class is None:
            raise ContractError("targeted patch needs target_class")
        target = torch.full((logits.shape[0],), int(objective.target_class),
                            dtype=torch.long, device=logits.device)
        return F.cross_entropy(logits, target)
    if kind in ("ntap", "preserve_acc", "destroy_acc") and labels is None:
        raise ContractError(f"objective {kind} needs labels")
    if kind == "ntap":
        return -F.cross_entropy(logits, labels)
    loss = policy_attack_loss(model, trace)
    if kind == "preserve_acc":
        loss = loss + objective.task_weight * F.cross_entropy(logits, labels)
    elif kind == "destroy_acc":
        loss = loss - objective.task_weight * F.cross_entropy(logits, labels)
    return loss


@dataclass
class PatchTrainingConfig:
    """Patch optimizer settings. ``lr`` is in normalized-pixel units."""

    lr: float = 0.2
    weight_decay: float = 0.0
    batch_size: int = 128
    iterations: int = 300
    restarts: int = 4
    probe_iterations: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.restarts < 1 or self.probe_iterations < 1:
            raise ConfigError("restarts and probe_iterations must be at least 1")
        if self.iterations < 0:
            raise ConfigError("iterations must be non-negative")

    def to_dict(self):
        return asdict(self)


class _PixelSpace:
    """Maps patch pixels to and from the model's normalized input units."""

    def __init__(self, model: AdaptiveViT, dtype):
        self.mean = torch.tensor(model.config.pixel_mean, dtype=dtype) * 255.0
        self.std = torch.tensor(model.config.pixel_std, dtype=dtype) * 255.0

    def to_unit(self, pixels):
        return (pixels - self.mean) / self.std

    def to_pixels(self, u):
        return u * self.std + self.mean


class _PatchRun:
    """One optimization trajectory: unit-space pixels, optimizer and batch stream."""

    def __init__(self, model, X, y, objective, space, pixels, location, config, stream):
        self.model, self.X, self.y, self.objective = model, X, y, objective
        self.space, self.location, self.config = space, location, config
        self.dtype = pixels.dtype
        self.u = space.to_unit(pixels).detach().clone().requires_grad_(True)
        self.opt = torch.optim.AdamW([self.u], lr=config.lr, weight_decay=config.weight_decay)
        self.rng = np.random.default_rng(derive_seed(config.seed, "patch-batches", *stream))
        self.order, self.cursor = self.rng.permutation(len(X)), 0
        self.history: list[float] = []

    def step(self):
        cfg = self.config
        if self.cursor + cfg.batch_size > len(self.order):
            self.order, self.cursor = self.rng.permutation(len(self.X)), 0
        idx = self.order[self.cursor:self.cursor + cfg.batch_size]
        self.cursor += cfg.batch_size
        it = len(self.history)
        xb = self.X[idx].to(self.dtype)
        yb = self.y[idx] if self.y is not None else None
        current = Patch(self.space.to_pixels(self.u), self.location)
        logits, trace = self.model(xb, patch=current, hard=False,
                                   seed=derive_seed(cfg.seed, "gumbel", it))
        loss = attack_loss(self.objective, self.model, logits, trace, yb)
        if not torch.isfinite(loss):
            raise NonFiniteLossError(f"non-finite patch loss at iteration {it}")
        self.opt.zero_grad(set_to_none=True)
        loss.backward()
        self.opt.step()
        with torch.no_grad():
            self.u.copy_(self.space.to_unit(project_quantize(self.space.to_pixels(self.u))))
        self.history.append(float(loss.detach()))

    def recent_loss(self, window: int = 10) -> float:
        return float(np.mean(self.history[-window:]))

    def pixels(self) -> torch.Tensor:
        with torch.no_grad():
            return project_quantize(self.space.to_pixels(self.u.detach()))


def train_patch(model: AdaptiveViT, X: torch.Tensor, y: torch.Tensor | None,
                objective: AttackObjective, patch_size: int, location=(0, 0),
                config: PatchTrainingConfig | None = None, init: Patch | None = None):
    """Optimize one universal patch against a frozen model.

    Each iteration pastes the patch on a minibatch, backpropagates the
    objective (batch mean) to the patch alone, takes an AdamW step in
    normalized units, then projects and quantizes the stored pixels.

    With ``restarts > 1`` that many random starts are each optimized for
    ``probe_iterations`` steps and the one with the lowest recent training
    loss continues to ``iterations``; some starts stall where the patch
    tokens halt before they can influence the rest. An explicit ``init``
    disables restarts. The model's parameters are never modified.
    Returns ``(patch, loss_history)`` for the chosen start.
    """
    config = config or PatchTrainingConfig()
    dtype = next(model.parameters()).dtype
    location = tuple(location)

    def start(r):
        seed = derive_seed(config.seed, "patch-init", *((r,) if r else ()))
        return init_patch(patch_size, location, seed=seed, image_size=model.config.image_size,
                          dtype=dtype)

    patch = (init if init is not None else start(0)).clone()
    patch.pixels = patch.pixels.to(dtype)
    checksum = model.checksum()
    meta = {"objective": asdict(objective), "seed": config.seed, "model_checksum": checksum,
            "iterations": 0, "restart": 0}
    if not objective.optimizes or config.iterations == 0:
        patch.meta.update(meta)
        return patch, []

    was_training = model.training
    flags = [p.requires_grad for p in model.parameters()]
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    space = _PixelSpace(model, dtype)
    n_starts = 1 if init is not None else config.restarts
    try:
        runs = [_PatchRun(model, X, y, objective, space,
                          patch.pixels if r == 0 else start(r).pixels.to(dtype), location,
                          config, (r,) if r else ())
                for r in range(n_starts)]
        probe = min(config.probe_iterations, config.iterations) if n_starts > 1 else 0
        for run in runs:
            for _ in range(probe):
                run.step()
        best = min(range(n_starts), key=lambda r: runs[r].recent_loss()) if probe else 0
        run = runs[best]
        while len(run.history) < config.iterations:
            run.step()
    finally:
        for p, f in zip(model.parameters(), flags):
            p.requires_grad_(f)
        model.train(was_training)
    if model.checksum() != checksum:
        raise ContractError("model parameters changed during patch training")
    patch.pixels = run.pixels()
    meta.update(iterations=config.iterations, restart=best)
    patch.meta.update(meta)
    return patch, run.history


@dataclass
class AttackReport:
    label: str
    flops_attack: float
    flops_clean: float
    flops_max: float
    acc_attack: float
    acc_clean: float
    attack_success: float | None
    histogram: dict = field(default_factory=dict)
    n_images: int = 0
    method: str = ""
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


def _run(model, X, y, patch, batch_size):
    dtype = next(model.parameters()).dtype
    flops, correct = [], 0
    for start in range(0, len(X), batch_size):
        xb = X[start:start + batch_size].to(dtype)
        logits, trace = model(xb, patch=patch, hard=True)
        flops.append(trace_flops(trace, model.config).total)
        if y is not None:
            correct += int((logits.argmax(-1) == y[start:start + batch_size]).sum())
    flops = np.concatenate(flops) if flops else np.zeros(0)
    return flops, (correct / len(X) if y is not None and len(X) else math.nan)


def evaluate_attack(model: AdaptiveViT, patch: Patch | None, X: torch.Tensor,
                    y: torch.Tensor | None = None, batch_size: int = 500, label: str = "",
                    flops_min: float | None = None, flops_max: float | None = None,
                    bins: int = 20) -> AttackReport:
    """Paste one patch on every eval image and measure compute and accuracy.

    ``flops_min`` defaults to the same model on the clean images and
    ``flops_max`` to the unmasked architecture. Runs without autograd.
    """
    was_training = model.training
    model.eval()
    with torch.no_grad():
        if torch.is_grad_enabled():
            raise ContractError("evaluation must not build gradients")
        clean_flops, clean_acc = _run(model, X, y, None, batch_size)
        if patch is None:
            attacked, acc = clean_flops, clean_acc
        else:
            attacked, acc = _run(model, X, y, patch, batch_size)
    model.train(was_training)
    f_min = float(clean_flops.mean()) if flops_min is None else float(flops_min)
    f_max = float(static_flops(model.config)) if flops_max is None else float(flops_max)
    f_att = float(attacked.mean())
    success = attack_success(f_att, f_min, f_max) if f_max > f_min else None
    counts, edges = np.histogram(attacked, bins=bins,
                                 range=(0.0, f_max if f_max > 0 else 1.0))
    return AttackReport(label, f_att, float(clean_flops.mean()), f_max, acc, clean_acc, success,
                        {"counts": counts.tolist(), "edges": edges.tolist()}, len(X))
