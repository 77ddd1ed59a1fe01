"""Vision transformer with token, head and block masks.

Every adaptive policy runs on the same substrate. Masks only ever gate
existing computation, so a forward pass stays differentiable in the input
pixels whatever the policy.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import adavit, ats, avit
from .config import ModelConfig
from .exceptions import ConfigError, ContractError
from .patch import Patch, apply_patch

MASK_VALUE = -1e9
CHECKPOINT_VERSION = 1


@dataclass
class TokenState:
    embeddings: torch.Tensor  # [B, N, d]
    active_mask: torch.Tensor  # [B, N] bool
    class_token_index: int = 0

    @property
    def num_tokens(self) -> int:
        return self.embeddings.shape[1]


@dataclass
class LayerTrace:
    active: torch.Tensor  # tokens processed by the layer, [B, N]
    attention: torch.Tensor  # [B, H, N, N]
    values: torch.Tensor  # [B, H, N, head_dim]
    head_mask: torch.Tensor  # [B, H]
    block_on: torch.Tensor  # [B]


@dataclass
class ComputeTrace:
    """What a forward pass did, layer by layer.

    ``token_masks[l]`` holds the tokens layer ``l`` actually processed (class
    token included); head and block masks are hard {0, 1} values. Policy
    specific records sit in ``halting`` (avit), ``keep_masks`` (adavit) and
    ``sampled``/``fallback`` keyed by 1-based layer (ats).
    """

    policy: str
    token_masks: list = field(default_factory=list)
    attentions: list = field(default_factory=list)
    head_masks: list = field(default_factory=list)
    block_masks: list = field(default_factory=list)
    halting: avit.HaltingRecord | None = None
    keep_masks: adavit.KeepMasks | None = None
    sampled: dict = field(default_factory=dict)
    fallback: dict = field(default_factory=dict)
    logits: torch.Tensor | None = None

    @property
    def num_layers(self) -> int:
        return len(self.token_masks)

    @property
    def retained_counts(self) -> torch.Tensor:
        """[B, L] number of tokens each layer processed."""
        return torch.stack([m.sum(-1) for m in self.token_masks], dim=1)


class Attention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.scale = self.head_dim**-0.5
        self.qkv = nn.Linear(dim, 3 * dim)
        # no bias, so a block with every head masked adds exactly nothing
        self.proj = nn.Linear(dim, dim, bias=False)

    def forward(self, x, active, head_mask, key_weights=None):
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.num_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        logits = (q @ k.transpose(-2, -1)) * self.scale
        logits = logits.masked_fill(~active[:, None, None, :], MASK_VALUE)
        attn = logits.softmax(dim=-1)
        if key_weights is not None:
            attn = attn * key_weights[:, None, None, :]
            attn = attn / attn.sum(-1, keepdim=True).clamp_min(1e-12)
        out = (attn @ v) * head_mask[:, :, None, None]
        out = out.transpose(1, 2).reshape(b, n, d)
        return self.proj(out), attn, v


class Block(nn.Module):
    def __init__(self, dim: int, num_heads: int, mlp_dim: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, mlp_dim)
        self.fc2 = nn.Linear(mlp_dim, dim)

    def forward(self, x, active, head_mask, gate, key_weights=None):
        """``gate`` [B, N] scales each token's residual update (0 freezes it)."""
        a, attn, v = self.attn(self.norm1(x), active, head_mask, key_weights)
        g = gate[..., None]
        x = x + g * a
        x = x + g * self.fc2(F.gelu(self.fc1(self.norm2(x))))
        return x, attn, v


class AdaptiveViT(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c = config
        self.patch_proj = nn.Linear(3 * c.patch_size**2, c.embed_dim)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, c.embed_dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, c.num_tokens, c.embed_dim))
        self.blocks = nn.ModuleList(Block(c.embed_dim, c.num_heads, c.mlp_dim)
                                    for _ in range(c.num_layers))
        self.norm = nn.LayerNorm(c.embed_dim)
        self.head = nn.Linear(c.embed_dim, c.num_classes)
        self.decision = (adavit.DecisionNetwork(c.num_layers, c.embed_dim, c.num_heads)
                         if c.adaptive_policy == "adavit" else None)
        mean = torch.tensor(c.pixel_mean, dtype=torch.float64).view(1, 1, 1, 3) * 255.0
        std = torch.tensor(c.pixel_std, dtype=torch.float64).view(1, 1, 1, 3) * 255.0
        self.register_buffer("pixel_mean", mean, persistent=False)
        self.register_buffer("pixel_std", std, persistent=False)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        self.apply(_init_weights)

    @property
    def policy(self) -> str:
        return self.config.adaptive_policy

    def with_policy(self, policy: str, params=None) -> "AdaptiveViT":
        """A model sharing this one's weights but running another policy.

        Switching to or from ``adavit`` is refused because the decision
        network only exists for that policy.
        """
        if (policy == "adavit") != (self.policy == "adavit"):
            raise ConfigError("cannot switch between adavit and other policies without retraining")
        clone = AdaptiveViT.__new__(AdaptiveViT)
        nn.Module.__init__(clone)
        for name, module in self.named_children():
            setattr(clone, name, module)
        clone.cls_token = self.cls_token
        clone.pos_embed = self.pos_embed
        clone.register_buffer("pixel_mean", self.pixel_mean, persistent=False)
        clone.register_buffer("pixel_std", self.pixel_std, persistent=False)
        clone.config = self.config.with_policy(policy, params)
        clone.train(self.training)
        return clone

    # -- front end -------------------------------------------------------
    def normalize(self, images: torch.Tensor) -> torch.Tensor:
        return (images - self.pixel_mean.to(images.dtype)) / self.pixel_std.to(images.dtype)

    def patch_embed(self, images: torch.Tensor) -> TokenState:
        """[B, H, W, 3] pixels in [0, 255] -> class token + one token per patch."""
        c = self.config
        if images.dim() != 4 or tuple(images.shape[1:]) != (c.image_size, c.image_size, 3):
            raise ConfigError(
                f"expected images of shape [B, {c.image_size}, {c.image_size}, 3], "
                f"got {tuple(images.shape)}")
        x = self.normalize(images)
        b, g, p = x.shape[0], c.grid_size, c.patch_size
        x = x.reshape(b, g, p, g, p, 3).permute(0, 1, 3, 2, 4, 5).reshape(b, g * g, p * p * 3)
        tokens = self.patch_proj(x)
        cls = self.cls_token.expand(b, -1, -1).to(tokens.dtype)
        emb = torch.cat([cls, tokens], dim=1) + self.pos_embed.to(tokens.dtype)
        active = torch.ones(b, emb.shape[1], dtype=torch.bool, device=emb.device)
        return TokenState(emb, active)

    def block_forward(self, state: TokenState, layer: int, head_mask=None, block_on=True,
                      key_weights=None, token_gate=None):
        """Run block ``layer`` on the active tokens of ``state``.

        Inactive tokens are excluded as keys and keep their embeddings. A
        disabled block is the identity. ``key_weights`` and ``token_gate``
        are optional soft per-token weights used by the gating policy.
        """
        x, active = state.embeddings, state.active_mask
        b, _, _ = x.shape
        h = self.config.num_heads
        if head_mask is None:
            head_mask = x.new_ones(b, h)
        elif head_mask.shape[-1] != h:
            raise ContractError(f"head_mask has {head_mask.shape[-1]} entries, model has {h} heads")
        head_mask = head_mask.to(x.dtype).expand(b, h)
        block_on = torch.as_tensor(block_on, dtype=x.dtype, device=x.device).expand(b)
        gate = active.to(x.dtype) if token_gate is None else token_gate
        gate = gate * block_on[:, None]
        out, attn, v = self.blocks[layer](x, active, head_mask, gate, key_weights)
        entry = LayerTrace(active, attn, v, head_mask, block_on)
        return TokenState(out, active, state.class_token_index), entry

    def classify(self, state: TokenState) -> torch.Tensor:
        return self.head(self.norm(state.embeddings[:, 0]))

    # -- full pass -------------------------------------------------------
    def forward(self, images: torch.Tensor, patch: Patch | None = None, *, hard: bool = True,
                seed: int | None = None):
        """Return ``(logits, trace)``.

        ``hard`` and ``seed`` only matter for the gating policy: hard masks
        are used to measure compute, soft ones to optimize against; ``seed``
        drives the Gumbel noise (the config's evaluation seed when omitted).
        """
        if patch is not None:
            images = apply_patch(images, patch)
        state = self.patch_embed(images)
        policy = self.policy
        if policy == "none":
            trace = self._forward_plain(state)
        elif policy == "avit":
            trace = self._forward_avit(state)
        elif policy == "ats":
            trace = self._forward_ats(state)
        else:
            trace = self._forward_adavit(state, hard, seed)
        return trace.logits, trace

    def _record(self, trace: ComputeTrace, entry: LayerTrace, hard_heads=None, hard_block=None):
        trace.token_masks.append(entry.active)
        trace.attentions.append(entry.attention)
        trace.head_masks.append(entry.head_mask.detach() if hard_heads is None else hard_heads)
        trace.block_masks.append(entry.block_on.detach() if hard_block is None else hard_block)

    def _forward_plain(self, state):
        trace = ComputeTrace("none")
        for layer in range(self.config.num_layers):
            state, entry = self.block_forward(state, layer)
            self._record(trace, entry)
        trace.logits = self.classify(state)
        return trace

    def _forward_avit(self, state):
        params = self.config.policy_params
        trace = ComputeTrace("avit")
        b, n, _ = state.embeddings.shape
        acc = avit.HaltingAccumulator(b, n - 1, self.config.num_layers, params, state.embeddings)
        for layer in range(self.config.num_layers):
            state, entry = self.block_forward(state, layer)
            self._record(trace, entry)
            h = avit.halting_score(state.embeddings[:, 1:], params)
            still = acc.update(h, layer)
            active = torch.cat([state.active_mask[:, :1], still], dim=1)
            state = TokenState(state.embeddings, active)
        trace.halting = acc.record()
        trace.logits = self.classify(state)
        return trace

    def _forward_ats(self, state):
        params = self.config.policy_params
        trace = ComputeTrace("ats")
        sampling = set(params.ats_layers)
        for layer in range(self.config.num_layers):
            state, entry = self.block_forward(state, layer)
            self._record(trace, entry)
            if layer + 1 in sampling:
                cls_attn = entry.attention[:, :, 0, :]
                norms = entry.values.norm(dim=-1)
                active = state.active_mask
                scores, fallback = ats.significance_scores(cls_attn, norms, active[:, None, :])
                scores = scores.mean(dim=1)
                n_target = (active[:, 1:].sum(-1)).clamp_max(params.max_tokens)
                keep = ats.inverse_transform_sample(scores, n_target) & active
                trace.sampled[layer + 1] = keep
                trace.fallback[layer + 1] = fallback.any(dim=1)
                state = TokenState(state.embeddings, keep)
        trace.logits = self.classify(state)
        return trace

    def _forward_adavit(self, state, hard, seed):
        params = self.config.policy_params
        trace = ComputeTrace("adavit")
        if seed is None:
            seed = params.eval_seed
        gen = seed if isinstance(seed, torch.Generator) else torch.Generator().manual_seed(int(seed))
        tau = params.gumbel_temperature
        patch_masks, head_masks, block_masks = [], [], []
        for layer in range(self.config.num_layers):
            m_p, m_h, m_b = self.decision(state.embeddings, layer)
            mp = adavit.gumbel_mask(m_p[:, 1:], tau, hard, gen)
            mh = adavit.gumbel_mask(m_h, tau, hard, gen)
            mb = adavit.gumbel_mask(m_b, tau, hard, gen)
            weights = torch.cat([mp.new_ones(mp.shape[0], 1), mp], dim=1)
            hard_tokens = weights.detach() > 0.5
            state = TokenState(state.embeddings, torch.ones_like(hard_tokens))
            state, entry = self.block_forward(state, layer, head_mask=mh, block_on=mb,
                                              key_weights=weights, token_gate=weights)
            trace.token_masks.append(hard_tokens)
            trace.attentions.append(entry.attention)
            trace.head_masks.append((mh.detach() > 0.5).to(mh.dtype))
            trace.block_masks.append((mb.detach() > 0.5).to(mb.dtype))
            patch_masks.append(mp)
            head_masks.append(mh)
            block_masks.append(mb)
        trace.keep_masks = adavit.KeepMasks(torch.stack(patch_masks, 1),
                                            torch.stack(head_masks, 1),
                                            torch.stack(block_masks, 1))
        trace.logits = self.classify(state)
        return trace

    # -- persistence -------------------------------------------------------
    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, tensor in sorted(self.state_dict().items()):
            h.update(name.encode())
            h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save({"format_version": CHECKPOINT_VERSION, "config": self.config.to_dict(),
                    "state_dict": self.state_dict()}, path)
        return path

    @classmethod
    def load(cls, path: str | Path) -> "AdaptiveViT":
        blob = torch.load(Path(path), map_location="cpu", weights_only=False)
        version = blob.get("format_version")
        if version != CHECKPOINT_VERSION:
            raise ConfigError(f"unsupported checkpoint version {version}")
        model = cls(ModelConfig.from_dict(blob["config"]))
        dtypes = {t.dtype for t in blob["state_dict"].values() if t.is_floating_point()}
        if len(dtypes) == 1:
            model = model.to(dtypes.pop())
        model.load_state_dict(blob["state_dict"])
        return model


def _init_weights(m):
    if isinstance(m, nn.Linear):
        nn.init.trunc_normal_(m.weight, std=0.02)
        if m.bias is not None:
            nn.init.zeros_(m.bias)
    elif isinstance(m, nn.LayerNorm):
        nn.init.ones_(m.weight)
        nn.init.zeros_(m.bias)


def training_loss(model: AdaptiveViT, logits, labels, trace: ComputeTrace) -> torch.Tensor:
    """Task loss plus the policy's efficiency terms."""
    params = model.config.policy_params
    if model.policy == "avit":
        return avit.avit_training_loss(logits, labels, trace.halting, params)
    if model.policy == "adavit":
        return adavit.adavit_training_loss(logits, labels, trace.keep_masks, params.gammas)
    return F.cross_entropy(logits, labels)
