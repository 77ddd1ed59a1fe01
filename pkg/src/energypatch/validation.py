"""Input checks shared by the estimators and the experiment drivers."""
from __future__ import annotations

import hashlib

import numpy as np
import torch

from .exceptions import ConfigError


def check_images(X, image_size: int | None = None, dtype=torch.float32) -> torch.Tensor:
    """Return images as a float tensor [N, H, W, 3] with values in [0, 255]."""
    t = X if torch.is_tensor(X) else torch.as_tensor(np.asarray(X))
    if t.dim() == 3:
        t = t[None]
    if t.dim() != 4 or t.shape[-1] != 3:
        raise ConfigError(f"images must have shape [N, H, W, 3], got {tuple(t.shape)}")
    if image_size is not None and (t.shape[1] != image_size or t.shape[2] != image_size):
        raise ConfigError(f"images must be {image_size}x{image_size}, got {t.shape[1]}x{t.shape[2]}")
    t = t.to(dtype)
    if t.numel() and (float(t.min()) < 0 or float(t.max()) > 255):
        raise ConfigError("pixel values must lie in [0, 255]")
    return t


def check_labels(y, n: int | None = None) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(y), dtype=torch.long)
    if t.dim() != 1:
        raise ConfigError("labels must be a 1-d array")
    if n is not None and len(t) != n:
        raise ConfigError(f"got {len(t)} labels for {n} images")
    return t


def derive_seed(seed: int, *names) -> int:
    """Independent named substream of a global seed."""
    h = hashlib.sha256(repr((int(seed), *names)).encode()).digest()
    return int.from_bytes(h[:4], "little")
