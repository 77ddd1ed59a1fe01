"""Adaptive token sampling: significance scores, quantile sampling, attack loss."""
from __future__ import annotations

import torch

from .config import AtsParams
from .exceptions import ContractError


def significance_scores(cls_attention: torch.Tensor, value_norms: torch.Tensor,
                        active: torch.Tensor | None = None):
    """Score non-class tokens by class attention times value norm.

    Both inputs have the class token at position 0 of the last axis. Returns
    ``(scores, fallback)`` where ``scores`` drops the class slot and sums to
    one, and ``fallback`` flags rows whose weighted mass was zero; those rows
    get uniform scores over the active tokens.
    """
    weighted = cls_attention[..., 1:] * value_norms[..., 1:]
    if active is not None:
        weighted = weighted * active[..., 1:].to(weighted.dtype)
    total = weighted.sum(-1, keepdim=True)
    fallback = total.squeeze(-1) <= 0
    if active is None:
        uniform = torch.ones_like(weighted)
    else:
        uniform = active[..., 1:].to(weighted.dtype).expand_as(weighted)
    uniform = uniform / uniform.sum(-1, keepdim=True).clamp_min(1)
    scores = torch.where(fallback[..., None], uniform,
                         weighted / torch.where(total > 0, total, torch.ones_like(total)))
    return scores, fallback


def inverse_transform_sample(scores: torch.Tensor, n_target) -> torch.Tensor:
    """Keep the tokens hit by fixed quantiles of the score CDF.

    ``scores`` is [..., M] over non-class tokens in original order. Quantiles
    (k - 0.5) / n for k = 1..n are each mapped to the first token whose CDF
    reaches them. Returns a boolean mask of length M + 1 with the class token
    (index 0) always set.
    """
    scores = scores.detach()
    lead = scores.shape[:-1]
    m = scores.shape[-1]
    flat = scores.reshape(-1, m)
    n = torch.as_tensor(n_target, device=scores.device).expand(lead).reshape(-1).long()
    keep = torch.zeros(flat.shape[0], m + 1, dtype=torch.bool, device=scores.device)
    keep[:, 0] = True
    n_max = int(n.max()) if n.numel() else 0
    if m == 0 or n_max == 0:
        return keep.reshape(*lead, m + 1)
    cdf = flat.cumsum(-1)
    cdf = cdf / cdf[:, -1:].clamp_min(torch.finfo(cdf.dtype).tiny)
    k = torch.arange(1, n_max + 1, device=scores.device, dtype=cdf.dtype)
    quantiles = (k[None, :] - 0.5) / n[:, None].clamp_min(1).to(cdf.dtype)
    idx = torch.searchsorted(cdf.contiguous(), quantiles.contiguous(), side="left").clamp_max(m - 1)
    valid = k[None, :] <= n[:, None]
    rows = torch.arange(flat.shape[0], device=scores.device)[:, None].expand_as(idx)
    keep[rows[valid], idx[valid] + 1] = True
    return keep.reshape(*lead, m + 1)


def ats_layer_loss(cls_attention: torch.Tensor, active: torch.Tensor | None = None) -> torch.Tensor:
    """Squared distance of class-token attention from uniform, summed over heads.

    ``cls_attention`` is [B, H, N] (class slot first). N counts the active
    tokens, class included; only active non-class slots enter the sum.
    Returns a per-image loss of shape [B].
    """
    if active is None:
        active = torch.ones(cls_attention.shape[0], cls_attention.shape[-1],
                            dtype=torch.bool, device=cls_attention.device)
    n = active.sum(-1).to(cls_attention.dtype)
    sel = active.clone()
    sel[:, 0] = False
    err = (cls_attention - 1.0 / n[:, None, None]) ** 2
    return (err * sel[:, None, :].to(err.dtype)).sum(dim=(-1, -2))


def ats_attack_loss(trace, params: AtsParams) -> torch.Tensor:
    """Layer-weighted uniform-attention loss, averaged over the batch."""
    total = 0.0
    for layer, weight in zip(params.ats_layers, params.layer_loss_weights):
        i = layer - 1
        if i >= len(trace.attentions) or trace.attentions[i] is None:
            raise ContractError(f"trace has no attention for ATS layer {layer}")
        attn = trace.attentions[i]
        total = total + weight * ats_layer_loss(attn[:, :, 0, :], trace.token_masks[i])
    return total.mean()
