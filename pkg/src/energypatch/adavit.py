"""Decision-network gating of patches, heads and blocks."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .exceptions import ContractError


@dataclass
class KeepMasks:
    """Keep masks for every block.

    patch [B, L, K] (non-class tokens), head [B, L, H], block [B, L].
    Values are soft probabilities or hard {0, 1}.
    """

    patch: torch.Tensor
    head: torch.Tensor
    block: torch.Tensor


def decision_forward(z: torch.Tensor, w_patch: torch.Tensor, w_head: torch.Tensor,
                     w_block: torch.Tensor):
    """Linear decision logits for one block.

    ``z`` is the block input [B, N, d]. Patch logits are per token; head and
    block logits come from the class token.
    """
    d = z.shape[-1]
    if w_patch.shape != (1, d) or w_head.shape[-1] != d or w_block.shape != (1, d):
        raise ContractError(
            f"decision weights {tuple(w_patch.shape)}, {tuple(w_head.shape)}, "
            f"{tuple(w_block.shape)} do not match embed dim {d}")
    m_patch = (z @ w_patch.T)[..., 0]
    cls = z[:, 0]
    m_head = cls @ w_head.T
    m_block = (cls @ w_block.T)[..., 0]
    return m_patch, m_head, m_block


class DecisionNetwork(nn.Module):
    """Three bias-free linear heads per block."""

    def __init__(self, num_layers: int, embed_dim: int, num_heads: int):
        super().__init__()
        self.patch = nn.ModuleList(nn.Linear(embed_dim, 1, bias=False) for _ in range(num_layers))
        self.head = nn.ModuleList(nn.Linear(embed_dim, num_heads, bias=False) for _ in range(num_layers))
        self.block = nn.ModuleList(nn.Linear(embed_dim, 1, bias=False) for _ in range(num_layers))

    def forward(self, z, layer: int):
        return decision_forward(z, self.patch[layer].weight, self.head[layer].weight,
                                self.block[layer].weight)


def gumbel_mask(logits: torch.Tensor, temperature: float = 1.0, hard: bool = False,
                seed: int | torch.Generator | None = None) -> torch.Tensor:
    """Binary-concrete relaxation of sigmoid keep decisions.

    soft = sigmoid((m + g1 - g0) / temperature) with independent Gumbel draws
    g0, g1 taken from ``seed``. With ``seed=None`` no noise is added. Hard
    masks threshold at 0.5 and carry the soft mask's gradient.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if seed is not None:
        gen = seed if isinstance(seed, torch.Generator) else torch.Generator().manual_seed(int(seed))
        u = torch.rand((2, *logits.shape), generator=gen, dtype=logits.dtype)
        u = u.to(logits.device).clamp(1e-10, 1 - 1e-10)
        g = -torch.log(-torch.log(u))
        logits = logits + g[1] - g[0]
    soft = torch.sigmoid(logits / temperature)
    if not hard:
        return soft
    hard_values = (soft > 0.5).to(soft.dtype)
    return hard_values + soft - soft.detach()


def usage_loss(masks: KeepMasks, gammas) -> torch.Tensor:
    """Squared gaps between mean keep rates and their targets."""
    g_p, g_h, g_b = gammas
    return ((masks.patch.mean() - g_p) ** 2
            + (masks.head.mean() - g_h) ** 2
            + (masks.block.mean() - g_b) ** 2)


def adavit_attack_loss(masks: KeepMasks) -> torch.Tensor:
    """Negated usage loss at zero targets; -3 when everything is kept."""
    return -usage_loss(masks, (0.0, 0.0, 0.0))


def adavit_training_loss(logits, labels, masks: KeepMasks, gammas) -> torch.Tensor:
    return F.cross_entropy(logits, labels) + usage_loss(masks, gammas)


def keep_rates(masks: KeepMasks) -> tuple[float, float, float]:
    return tuple(float(m.detach().mean()) for m in (masks.patch, masks.head, masks.block))
