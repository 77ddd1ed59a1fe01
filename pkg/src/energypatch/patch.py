"""Universal patch: initialization, pasting, projection and on-disk form."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .exceptions import ConfigError


@dataclass
class Patch:
    """A square pixel block pasted at a fixed location.

    ``pixels`` is [P, P, 3] in [0, 255]; ``location`` is the (row, col) of
    the top-left corner.
    """

    pixels: torch.Tensor
    location: tuple[int, int] = (0, 0)
    meta: dict = field(default_factory=dict)

    @property
    def size(self) -> int:
        return self.pixels.shape[0]

    def area_fraction(self, image_size: int) -> float:
        return self.size**2 / image_size**2

    def clone(self) -> "Patch":
        return Patch(self.pixels.detach().clone(), tuple(self.location), dict(self.meta))


def check_bounds(size: int, location, image_size: int) -> None:
    row, col = location
    if size < 1 or row < 0 or col < 0 or row + size > image_size or col + size > image_size:
        raise ConfigError(
            f"patch of size {size} at {tuple(location)} does not fit a {image_size}px image")


def init_patch(size: int, location=(0, 0), seed: int = 0, image_size: int | None = None,
               dtype=torch.float32) -> Patch:
    """IID uniform integer pixels in [0, 255], reproducible per seed."""
    if image_size is not None:
        check_bounds(size, location, image_size)
    rng = np.random.default_rng(seed)
    pixels = rng.integers(0, 256, size=(size, size, 3)).astype(np.float64)
    return Patch(torch.as_tensor(pixels, dtype=dtype), tuple(int(v) for v in location),
                 {"seed": seed})


def apply_patch(images: torch.Tensor, patch: Patch) -> torch.Tensor:
    """Paste ``patch`` over a batch [B, H, W, 3]; differentiable in the patch pixels."""
    row, col = patch.location
    check_bounds(patch.size, patch.location, min(images.shape[1], images.shape[2]))
    out = images.clone()
    p = patch.size
    out[:, row:row + p, col:col + p, :] = patch.pixels.to(out.dtype)
    return out


def project_quantize(pixels: torch.Tensor) -> torch.Tensor:
    """Clip to [0, 255] and round to the 256 integer levels."""
    return torch.round(torch.clamp(pixels, 0.0, 255.0))


def _png_path(path) -> Path:
    path = Path(path)
    return path if path.suffix == ".png" else path.with_name(path.name + ".png")


def save_patch(patch: Patch, path: str | Path, **sidecar) -> Path:
    """Write a lossless 8-bit PNG plus a ``.json`` sidecar next to it."""
    path = _png_path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    q = project_quantize(patch.pixels.detach().cpu())
    if not torch.equal(q, patch.pixels.detach().cpu().to(q.dtype)):
        raise ValueError("patch is not quantized; call project_quantize first")
    Image.fromarray(q.numpy().astype(np.uint8)).save(path, format="PNG")
    meta = dict(patch.meta)
    meta.update(sidecar)
    meta.update(size=patch.size, location=list(patch.location))
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, default=str))
    return path


def load_patch(path: str | Path, dtype=torch.float32) -> Patch:
    path = _png_path(path)
    pixels = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64)
    meta = json.loads(path.with_suffix(".json").read_text())
    return Patch(torch.as_tensor(pixels, dtype=dtype), tuple(meta["location"]), meta)
