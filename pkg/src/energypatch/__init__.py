"""Universal patches that raise the compute of input-adaptive vision transformers."""
from .attack import AttackObjective, AttackReport, PatchTrainingConfig, evaluate_attack, train_patch
from .config import AtsParams, DecisionParams, HaltingParams, ModelConfig
from .defense import DefenseConfig, PatchPool, adversarial_train
from .estimators import AdaptiveViTClassifier, PatchAdversarialTraining, UniversalPatchAttack
from .exceptions import ConfigError, ContractError, DomainError, NonFiniteLossError
from .flops import FlopsReport, attack_success, static_flops, trace_flops
from .patch import Patch, apply_patch, load_patch, save_patch
from .vit import AdaptiveViT, ComputeTrace

__version__ = "0.1.0"

__all__ = [
    "AttackObjective",
    "AttackReport",
    "PatchTrainingConfig",
    "evaluate_attack",
    "train_patch",
    "AtsParams",
    "DecisionParams",
    "HaltingParams",
    "ModelConfig",
    "DefenseConfig",
    "PatchPool",
    "adversarial_train",
    "AdaptiveViTClassifier",
    "PatchAdversarialTraining",
    "UniversalPatchAttack",
    "ConfigError",
    "ContractError",
    "DomainError",
    "NonFiniteLossError",
    "FlopsReport",
    "attack_success",
    "static_flops",
    "trace_flops",
    "Patch",
    "apply_patch",
    "load_patch",
    "save_patch",
    "AdaptiveViT",
    "ComputeTrace",
]
