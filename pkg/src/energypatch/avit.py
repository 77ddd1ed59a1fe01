"""Token halting: cumulative halting scores, ponder and distribution losses."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .config import HaltingParams
from .exceptions import DomainError


@dataclass
class HaltingRecord:
    """Per-token halting outcome for a batch.

    scores      [B, L, K] halting score of each non-class token at each layer;
                zero once the token has halted.
    halt_layer  [B, K] 1-based layer at which the token halted (L if never).
    remainder   [B, K] one minus the cumulative score before ``halt_layer``.
    """

    scores: torch.Tensor
    halt_layer: torch.Tensor
    remainder: torch.Tensor

    @property
    def num_tokens(self) -> int:
        return self.scores.shape[-1]

    @property
    def num_layers(self) -> int:
        return self.scores.shape[1]


def halting_score(tokens: torch.Tensor, params: HaltingParams) -> torch.Tensor:
    """Halting score read off embedding channel 0: sigmoid(gain * t[0] + bias)."""
    return torch.sigmoid(params.gate_gain * tokens[..., 0] + params.gate_bias)


class HaltingAccumulator:
    """Layer-by-layer bookkeeping of cumulative halting scores.

    Call :meth:`update` once per layer with that layer's scores for the
    non-class tokens. It returns the mask of tokens still active for the
    next layer. A token that halts never comes back.
    """

    def __init__(self, batch: int, num_tokens: int, num_layers: int,
                 params: HaltingParams, like: torch.Tensor):
        self.params = params
        self.num_layers = num_layers
        self.cumulative = like.new_zeros(batch, num_tokens)
        self.active = torch.ones(batch, num_tokens, dtype=torch.bool, device=like.device)
        self.halt_layer = torch.full((batch, num_tokens), num_layers,
                                     dtype=torch.long, device=like.device)
        self.remainder = like.new_ones(batch, num_tokens)
        self._scores: list[torch.Tensor] = []

    def update(self, h: torch.Tensor, layer: int) -> torch.Tensor:
        """Consume scores ``h`` [B, K] of 0-based ``layer``.

        At the last layer every surviving token halts and its score is set
        to 1, so the final entry of the profile is the survivor fraction.
        """
        if layer == self.num_layers - 1:
            h = self.active.to(h.dtype)
        else:
            h = h * self.active
        new_cumulative = self.cumulative + h
        if layer == self.num_layers - 1:
            halting = self.active
        else:
            halting = self.active & (new_cumulative.detach() >= 1.0 - self.params.epsilon)
        self.halt_layer = torch.where(halting, torch.full_like(self.halt_layer, layer + 1),
                                      self.halt_layer)
        self.remainder = torch.where(halting, 1.0 - self.cumulative, self.remainder)
        self.cumulative = new_cumulative
        self.active = self.active & ~halting
        self._scores.append(h)
        return self.active

    def record(self) -> HaltingRecord:
        return HaltingRecord(torch.stack(self._scores, dim=1), self.halt_layer, self.remainder)


def apply_halting(scores: torch.Tensor, params: HaltingParams) -> HaltingRecord:
    """Run the halting rule over a full score sequence.

    ``scores`` has shape [L], [L, K] or [B, L, K]. Scores given for layers
    after a token halts are ignored.
    """
    s = scores if torch.is_tensor(scores) else torch.as_tensor(scores, dtype=torch.get_default_dtype())
    if s.dim() == 1:
        s = s[None, :, None]
    elif s.dim() == 2:
        s = s[None]
    batch, num_layers, num_tokens = s.shape
    acc = HaltingAccumulator(batch, num_tokens, num_layers, params, s)
    for layer in range(num_layers):
        acc.update(s[:, layer], layer)
    return acc.record()


def ponder_loss(record: HaltingRecord) -> torch.Tensor:
    """Mean of halting layer plus remainder; gradients flow through the remainder only."""
    if record.num_tokens == 0:
        raise DomainError("ponder loss needs at least one non-class token")
    return (record.halt_layer.to(record.remainder.dtype) + record.remainder).mean()


def gaussian_prior(num_layers: int, target_layer: float, prior_std: float,
                   dtype=None) -> torch.Tensor:
    layers = torch.arange(1, num_layers + 1, dtype=dtype or torch.get_default_dtype())
    logits = -((layers - target_layer) ** 2) / (2.0 * prior_std**2)
    return torch.softmax(logits, dim=0)


def kl_divergence(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    """KL(p || q) for discrete distributions on the last axis, 0 log 0 = 0.

    The log is floored so the gradient stays finite where p is exactly 0.
    """
    tiny = torch.finfo(p.dtype).tiny
    return (p * (torch.log(p.clamp_min(tiny)) - torch.log(q.clamp_min(tiny)))).sum(-1)


def distribution_loss(record: HaltingRecord, params: HaltingParams) -> torch.Tensor:
    """KL between the normalized mean halting profile and a Gaussian prior over layers.

    The profile averages halting scores over tokens and over the batch.
    """
    p = record.scores.mean(dim=(0, 2))
    p = p / p.sum().clamp_min(1e-8)
    q = gaussian_prior(record.num_layers, params.target_layer, params.prior_std, dtype=p.dtype)
    return kl_divergence(p, q.to(p.device))


def avit_attack_loss(record: HaltingRecord, params: HaltingParams) -> torch.Tensor:
    return -(params.alpha_d * distribution_loss(record, params)
             + params.alpha_p * ponder_loss(record))


def avit_training_loss(logits, labels, record: HaltingRecord, params: HaltingParams):
    return (F.cross_entropy(logits, labels)
            + params.alpha_d * distribution_loss(record, params)
            + params.alpha_p * ponder_loss(record))


def expected_depth(record: HaltingRecord) -> float:
    """Mean halting layer over tokens and images."""
    return float(record.halt_layer.double().mean())


__all__ = [
    "HaltingRecord", "HaltingAccumulator", "halting_score", "apply_halting",
    "ponder_loss", "gaussian_prior", "kl_divergence", "distribution_loss",
    "avit_attack_loss", "avit_training_loss", "expected_depth",
]
