"""Analytic FLOPs accounting for masked forward passes.

A multiply-accumulate counts as 2 FLOPs. Softmax, normalization, activation
and residual additions are not counted.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .exceptions import ContractError, DomainError

PARTS = ("embed", "qkv", "attn_logits", "attn_apply", "out_proj", "mlp", "head")


def block_breakdown(n_active: int, embed_dim: int, heads_active: int, heads_total: int,
                    mlp_ratio: float = 4.0, block_on: bool = True) -> dict[str, int]:
    if n_active < 1:
        raise DomainError("a block processes at least the class token")
    if not block_on:
        return {"qkv": 0, "attn_logits": 0, "attn_apply": 0, "out_proj": 0, "mlp": 0}
    n, d = int(n_active), int(embed_dim)
    d_attn = (d // heads_total) * int(heads_active)
    mlp_dim = int(mlp_ratio * d)
    return {
        "qkv": 2 * n * d * 3 * d_attn,
        "attn_logits": 2 * n * n * d_attn,
        "attn_apply": 2 * n * n * d_attn,
        "out_proj": 2 * n * d * d,
        "mlp": 2 * n * d * mlp_dim * 2,
    }


def block_flops(n_active: int, embed_dim: int, heads_active: int, heads_total: int,
                mlp_ratio: float = 4.0, block_on: bool = True) -> int:
    return sum(block_breakdown(n_active, embed_dim, heads_active, heads_total,
                               mlp_ratio, block_on).values())


def embed_flops(config: ModelConfig) -> int:
    return 2 * config.grid_size**2 * 3 * config.patch_size**2 * config.embed_dim


def head_flops(config: ModelConfig) -> int:
    return 2 * config.embed_dim * config.num_classes


@dataclass
class FlopsReport:
    """FLOPs of a batch of forward passes.

    ``per_layer`` is [B, L]; ``breakdown`` maps each part name to a [B]
    array. ``total`` is their sum per image.
    """

    per_layer: np.ndarray
    breakdown: dict

    @property
    def total(self) -> np.ndarray:
        return sum(self.breakdown[k] for k in PARTS)

    @property
    def mean_total(self) -> float:
        return float(np.mean(self.total))

    def to_dict(self) -> dict:
        return {
            "per_layer": self.per_layer.tolist(),
            "breakdown": {k: self.breakdown[k].tolist() for k in PARTS},
            "total": self.total.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["image", *PARTS, "total"])
        for i, total in enumerate(self.total):
            w.writerow([i, *(int(self.breakdown[k][i]) for k in PARTS), int(total)])
        return buf.getvalue()


def trace_flops(trace, config: ModelConfig) -> FlopsReport:
    """Sum block costs over the layers recorded in ``trace`` plus embed and head."""
    if trace.num_layers != config.num_layers:
        raise ContractError(f"trace has {trace.num_layers} layers, config {config.num_layers}")
    counts = trace.retained_counts.detach().cpu().numpy().astype(np.int64)
    if counts.shape[0] and int(trace.token_masks[0].shape[-1]) != config.num_tokens:
        raise ContractError("trace token count does not match config geometry")
    b, num_layers = counts.shape
    heads = np.stack([m.detach().cpu().numpy() for m in trace.head_masks], axis=1)
    blocks = np.stack([m.detach().cpu().numpy() for m in trace.block_masks], axis=1)
    heads = np.rint(heads.sum(-1)).astype(np.int64)
    blocks = blocks > 0.5
    parts = {k: np.zeros(b, dtype=np.int64) for k in PARTS}
    per_layer = np.zeros((b, num_layers), dtype=np.int64)
    for i in range(b):
        for layer in range(num_layers):
            bd = block_breakdown(counts[i, layer], config.embed_dim, heads[i, layer],
                                 config.num_heads, config.mlp_ratio, bool(blocks[i, layer]))
            for k, v in bd.items():
                parts[k][i] += v
            per_layer[i, layer] = sum(bd.values())
    parts["embed"][:] = embed_flops(config)
    parts["head"][:] = head_flops(config)
    return FlopsReport(per_layer, parts)


def static_flops(config: ModelConfig) -> int:
    """Cost of the full, unmasked architecture."""
    per_block = block_flops(config.num_tokens, config.embed_dim, config.num_heads,
                            config.num_heads, config.mlp_ratio)
    return embed_flops(config) + config.num_layers * per_block + head_flops(config)


def attack_success(flops_attack: float, flops_min: float, flops_max: float) -> float:
    """Fraction of the efficiency gain undone by an attack (negative when compute drops)."""
    if not flops_max > flops_min:
        raise DomainError(f"flops_max ({flops_max}) must exceed flops_min ({flops_min})")
    return (flops_attack - flops_min) / (flops_max - flops_min)
