"""Datasets: CIFAR-10 from its python batch files, and seeded synthetic blobs."""
from __future__ import annotations

import os
import pickle
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .exceptions import ConfigError

DATA_ROOT_ENV = "ENERGYPATCH_DATA_ROOT"
CIFAR_DIRNAME = "cifar-10-batches-py"
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch"


@dataclass
class DatasetSpec:
    source: str = "cifar10"
    image_size: int = 32
    num_classes: int = 10
    train_count: int = 5000
    eval_count: int = 1000
    split_seed: int = 0
    root: str | None = None

    def __post_init__(self):
        if self.source not in ("cifar10", "synthetic"):
            raise ConfigError(f"unknown dataset source {self.source!r}")
        if self.source == "cifar10" and (self.image_size != 32 or self.num_classes != 10):
            raise ConfigError("CIFAR-10 images are 32x32 with 10 classes")

    def to_dict(self) -> dict:
        return asdict(self)


def resolve_cifar_root(root: str | os.PathLike | None = None) -> Path | None:
    """Locate the directory holding the CIFAR-10 batch files, or None."""
    candidates = []
    if root:
        candidates.append(Path(root))
    if os.environ.get(DATA_ROOT_ENV):
        candidates.append(Path(os.environ[DATA_ROOT_ENV]))
    for c in candidates:
        for d in (c, c / CIFAR_DIRNAME):
            if (d / CIFAR_TEST_FILE).exists() and all((d / f).exists() for f in CIFAR_TRAIN_FILES):
                return d
    return None


def cifar10_available(root=None) -> bool:
    return resolve_cifar_root(root) is not None


def _read_batch(path: Path):
    with open(path, "rb") as f:
        d = pickle.load(f, encoding="bytes")
    data = np.asarray(d[b"data"], dtype=np.uint8).reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    labels = np.asarray(d[b"labels"], dtype=np.int64)
    return data, labels


def load_cifar10(root=None, train_count: int = 5000, eval_count: int = 1000, split_seed: int = 0):
    """Random train/eval subsets of CIFAR-10 as uint8 [N, 32, 32, 3] arrays."""
    d = resolve_cifar_root(root)
    if d is None:
        raise FileNotFoundError(
            f"CIFAR-10 batches not found; pass root or set ${DATA_ROOT_ENV} "
            f"to a directory containing {CIFAR_DIRNAME}/")
    parts = [_read_batch(d / f) for f in CIFAR_TRAIN_FILES]
    x_train = np.concatenate([p[0] for p in parts])
    y_train = np.concatenate([p[1] for p in parts])
    x_test, y_test = _read_batch(d / CIFAR_TEST_FILE)
    rng = np.random.default_rng(split_seed)
    tr = rng.permutation(len(x_train))[:train_count]
    te = rng.permutation(len(x_test))[:eval_count]
    return x_train[tr], y_train[tr], x_test[te], y_test[te]


def _palette(num_classes: int) -> np.ndarray:
    hues = np.arange(num_classes) / num_classes
    # HSV -> RGB at full saturation and value
    k = (np.array([5.0, 3.0, 1.0])[None, :] + hues[:, None] * 6.0) % 6.0
    rgb = 1.0 - np.clip(np.minimum(k, 4.0 - k), 0.0, 1.0)
    return 40.0 + 215.0 * rgb


def make_synthetic(n: int, image_size: int = 32, num_classes: int = 10, seed: int = 0):
    """Gaussian-blob images whose class is the blob's colour.

    Each image is a noisy grey background with one coloured blob of random
    width at a random position, plus a dimmer grey distractor blob.
    Deterministic given ``seed``.
    """
    rng = np.random.default_rng(seed)
    palette = _palette(num_classes)
    y = rng.integers(0, num_classes, size=n)
    yy, xx = np.mgrid[0:image_size, 0:image_size].astype(np.float64)
    margin = image_size / 8
    images = np.empty((n, image_size, image_size, 3), dtype=np.float64)
    for i in range(n):
        bg = 110.0 + rng.normal(0.0, 18.0, size=(image_size, image_size, 3))
        cy, cx = rng.uniform(margin, image_size - margin, size=2)
        sigma = rng.uniform(image_size / 12, image_size / 7)
        w = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))[..., None]
        colour = palette[y[i]] + rng.normal(0.0, 12.0, size=3)
        img = bg * (1 - w) + colour * w
        dy, dx = rng.uniform(0, image_size, size=2)
        wd = 0.5 * np.exp(-((yy - dy) ** 2 + (xx - dx) ** 2) / (2 * (sigma * 0.8) ** 2))[..., None]
        img = img * (1 - wd) + 200.0 * wd
        images[i] = img
    return np.clip(np.rint(images), 0, 255).astype(np.uint8), y.astype(np.int64)


def load_dataset(spec: DatasetSpec):
    """Train and eval arrays ``(x_train, y_train, x_eval, y_eval)`` for a dataset description."""
    if spec.source == "cifar10":
        return load_cifar10(spec.root, spec.train_count, spec.eval_count, spec.split_seed)
    x_tr, y_tr = make_synthetic(spec.train_count, spec.image_size, spec.num_classes,
                                seed=spec.split_seed * 2 + 1)
    x_ev, y_ev = make_synthetic(spec.eval_count, spec.image_size, spec.num_classes,
                                seed=spec.split_seed * 2 + 2)
    return x_tr, y_tr, x_ev, y_ev
