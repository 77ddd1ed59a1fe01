"""Adversarial training against a growing pool of universal patches."""
from __future__ import annotations

import copy
import json
import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .attack import AttackObjective, PatchTrainingConfig, train_patch
from .exceptions import ContractError
from .patch import Patch, apply_patch, init_patch, load_patch, save_patch
from .training import TrainConfig, train_model
from .validation import derive_seed
from .vit import AdaptiveViT

log = logging.getLogger(__name__)


@dataclass
class PoolEntry:
    patch: Patch
    epoch_fraction: float
    iterations: int


class PatchPool:
    """Append-only collection of patches sharing one size and location."""

    def __init__(self, size: int, location=(0, 0)):
        self.size = int(size)
        self.location = tuple(int(v) for v in location)
        self._entries: list[PoolEntry] = []

    def __len__(self):
        return len(self._entries)

    @property
    def entries(self) -> tuple[PoolEntry, ...]:
        return tuple(self._entries)

    @property
    def patches(self) -> list[Patch]:
        return [e.patch for e in self._entries]

    def add(self, patch: Patch, epoch_fraction: float = 0.0, iterations: int = 0) -> None:
        if patch.size != self.size or tuple(patch.location) != self.location:
            raise ContractError(
                f"pool holds {self.size}px patches at {self.location}, "
                f"got {patch.size}px at {tuple(patch.location)}")
        stored = patch.clone()
        stored.pixels.requires_grad_(False)
        self._entries.append(PoolEntry(stored, float(epoch_fraction), int(iterations)))

    def save(self, directory: str | Path) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        manifest = {"size": self.size, "location": list(self.location), "patches": []}
        for i, e in enumerate(self._entries):
            name = f"patch_{i:04d}"
            save_patch(e.patch, directory / name)
            manifest["patches"].append({"file": name + ".png", "epoch_fraction": e.epoch_fraction,
                                        "iterations": e.iterations})
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))
        return directory

    @classmethod
    def load(cls, directory: str | Path) -> "PatchPool":
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        pool = cls(manifest["size"], manifest["location"])
        for item in manifest["patches"]:
            pool.add(load_patch(directory / item["file"]), item["epoch_fraction"],
                     item["iterations"])
        return pool


def sample_patch(pool: PatchPool, seed: int | np.random.Generator) -> Patch:
    """Uniform draw from the pool."""
    if len(pool) == 0:
        raise ContractError("cannot sample from an empty patch pool")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return pool.entries[int(rng.integers(len(pool)))].patch


def refresh_steps(steps_per_epoch: int, refreshes: int = 5) -> list[int]:
    """Steps (1-based, within an epoch) after which a new patch is trained.

    A step repeats when the epoch has fewer steps than refreshes, so the
    pool still gains ``refreshes`` patches per epoch.
    """
    return [max(1, round(steps_per_epoch * k / refreshes)) for k in range(1, refreshes + 1)]


def refresh_pool(model: AdaptiveViT, X, y, pool: PatchPool, objective: AttackObjective,
                 budget_iterations: int = 500, config: PatchTrainingConfig | None = None,
                 epoch_fraction: float = 0.0) -> PatchPool:
    """Train one patch against a frozen snapshot of ``model`` and append it."""
    config = config or PatchTrainingConfig()
    config = PatchTrainingConfig(**{**config.to_dict(), "iterations": budget_iterations})
    snapshot = copy.deepcopy(model)
    patch, _ = train_patch(snapshot, X, y, objective, pool.size, pool.location, config)
    pool.add(patch, epoch_fraction, budget_iterations)
    return pool


@dataclass
class DefenseConfig:
    epochs: int = 2
    refreshes_per_epoch: int = 5
    budget_iterations: int = 500
    patch_lr: float = 0.8
    patch_batch_size: int = 128
    seed: int = 0

    def to_dict(self):
        return asdict(self)


def adversarial_train(model: AdaptiveViT, X, y, objective: AttackObjective, patch_size: int,
                      location=(0, 0), config: DefenseConfig | None = None,
                      train_config: TrainConfig | None = None, pool: PatchPool | None = None):
    """Fine-tune ``model`` with a sampled pool patch pasted on every minibatch.

    Training pauses at each 20% mark of an epoch (for the default five
    refreshes) to add a patch optimized against the current weights.
    Returns ``(model, pool, history)``; the model is updated in place.
    """
    config = config or DefenseConfig()
    train_config = train_config or TrainConfig(epochs=config.epochs, lr=5e-4, seed=config.seed)
    train_config = TrainConfig(**{**train_config.to_dict(), "epochs": config.epochs})
    if pool is None:
        pool = PatchPool(patch_size, location)
        pool.add(init_patch(patch_size, location, seed=derive_seed(config.seed, "pool-init"),
                            image_size=model.config.image_size))
    steps_per_epoch = math.ceil(len(X) / train_config.batch_size)
    marks = Counter(refresh_steps(steps_per_epoch, config.refreshes_per_epoch))
    rng = np.random.default_rng(derive_seed(config.seed, "pool-sampling"))
    patch_config = PatchTrainingConfig(lr=config.patch_lr, batch_size=config.patch_batch_size,
                                       iterations=config.budget_iterations)

    def paste(images, step):
        return apply_patch(images, sample_patch(pool, rng))

    def on_step(step):
        within = step - (step - 1) // steps_per_epoch * steps_per_epoch
        for k in range(marks[within]):
            epoch_fraction = step / steps_per_epoch
            cfg = PatchTrainingConfig(**{**patch_config.to_dict(),
                                         "seed": derive_seed(config.seed, "refresh", step, k)})
            refresh_pool(model, X, y, pool, objective, config.budget_iterations, cfg,
                         epoch_fraction)
            model.train()
            log.info("pool refreshed at epoch %.2f, size %d", epoch_fraction, len(pool))

    history = train_model(model, X, y, train_config, transform_batch=paste, on_step=on_step)
    return model, pool, history
