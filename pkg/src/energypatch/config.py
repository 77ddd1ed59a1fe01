"""Model configuration records and their JSON form."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any

from .exceptions import ConfigError

POLICIES = ("none", "avit", "ats", "adavit")

# CIFAR-10 channel statistics in [0, 1] units.
CIFAR_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR_STD = (0.2470, 0.2435, 0.2616)


@dataclass
class HaltingParams:
    """Token-halting hyperparameters (threshold, gate, loss weights, prior)."""

    epsilon: float = 0.01
    gate_gain: float = 5.0
    gate_bias: float = -10.0
    alpha_d: float = 0.1
    alpha_p: float = 0.001
    target_layer: float = 1.0
    prior_std: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.epsilon < 1.0:
            raise ConfigError(f"epsilon must lie in (0, 1), got {self.epsilon}")
        if self.prior_std <= 0:
            raise ConfigError(f"prior_std must be positive, got {self.prior_std}")


@dataclass
class AtsParams:
    """Adaptive token sampling hyperparameters.

    ``ats_layers`` are 1-based layer indices. When ``layer_loss_weights`` is
    omitted, the first sampling layer gets weight 1.0 and each later one is
    0.2 times the previous.
    """

    ats_layers: tuple[int, ...] = (2, 3)
    max_tokens: int = 197
    layer_loss_weights: tuple[float, ...] | None = None

    def __post_init__(self):
        self.ats_layers = tuple(int(i) for i in self.ats_layers)
        if self.layer_loss_weights is None:
            self.layer_loss_weights = tuple(0.2**i for i in range(len(self.ats_layers)))
        self.layer_loss_weights = tuple(float(w) for w in self.layer_loss_weights)
        if len(self.layer_loss_weights) != len(self.ats_layers):
            raise ConfigError("layer_loss_weights must align with ats_layers")
        if self.max_tokens < 1:
            raise ConfigError("max_tokens must be >= 1")
        if any(w < 0 for w in self.layer_loss_weights):
            raise ConfigError("layer_loss_weights must be non-negative")
        if len(set(self.ats_layers)) != len(self.ats_layers):
            raise ConfigError("ats_layers must be distinct")


@dataclass
class DecisionParams:
    """Gating hyperparameters: Gumbel temperature and keep-ratio targets."""

    gumbel_temperature: float = 1.0
    gammas: tuple[float, float, float] = (0.7, 0.7, 0.7)
    eval_seed: int = 0

    def __post_init__(self):
        self.gammas = tuple(float(g) for g in self.gammas)
        if self.gumbel_temperature <= 0:
            raise ConfigError("gumbel_temperature must be positive")
        if len(self.gammas) != 3 or any(not 0.0 <= g <= 1.0 for g in self.gammas):
            raise ConfigError(f"gammas must be three values in [0, 1], got {self.gammas}")


_PARAM_TYPES = {"none": None, "avit": HaltingParams, "ats": AtsParams, "adavit": DecisionParams}


@dataclass
class ModelConfig:
    image_size: int = 32
    patch_size: int = 8
    embed_dim: int = 64
    num_layers: int = 4
    num_heads: int = 4
    mlp_ratio: float = 4.0
    num_classes: int = 10
    adaptive_policy: str = "none"
    policy_params: Any = None
    pixel_mean: tuple[float, float, float] = CIFAR_MEAN
    pixel_std: tuple[float, float, float] = CIFAR_STD

    def __post_init__(self):
        if self.adaptive_policy not in POLICIES:
            raise ConfigError(f"unknown adaptive_policy {self.adaptive_policy!r}")
        if self.image_size % self.patch_size:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.embed_dim % self.num_heads:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}"
            )
        if int(self.mlp_ratio * self.embed_dim) != self.mlp_ratio * self.embed_dim:
            raise ConfigError("mlp_ratio * embed_dim must be an integer")
        self.pixel_mean = tuple(float(v) for v in self.pixel_mean)
        self.pixel_std = tuple(float(v) for v in self.pixel_std)
        param_type = _PARAM_TYPES[self.adaptive_policy]
        if param_type is None:
            self.policy_params = None
        elif self.policy_params is None:
            self.policy_params = param_type()
        elif isinstance(self.policy_params, dict):
            self.policy_params = param_type(**self.policy_params)
        elif not isinstance(self.policy_params, param_type):
            raise ConfigError(
                f"policy {self.adaptive_policy} expects {param_type.__name__}, "
                f"got {type(self.policy_params).__name__}"
            )
        if self.adaptive_policy == "ats":
            bad = [i for i in self.policy_params.ats_layers if not 1 <= i <= self.num_layers]
            if bad:
                raise ConfigError(f"ats_layers {bad} outside [1, {self.num_layers}]")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_tokens(self) -> int:
        return 1 + self.grid_size**2

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def mlp_dim(self) -> int:
        return int(self.mlp_ratio * self.embed_dim)

    def with_policy(self, policy: str, params=None) -> "ModelConfig":
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(adaptive_policy=policy, policy_params=params)
        return ModelConfig(**values)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pixel_mean"] = list(self.pixel_mean)
        d["pixel_std"] = list(self.pixel_std)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown ModelConfig fields: {sorted(unknown)}")
        return cls(**d)

    def to_json(self, path: str | Path | None = None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_json(cls, source: str | Path) -> "ModelConfig":
        text = str(source)
        if not text.lstrip().startswith("{"):
            text = Path(source).read_text()
        return cls.from_dict(json.loads(text))
