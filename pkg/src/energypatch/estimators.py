"""scikit-learn style estimators around the backbone, the attack and the defense."""
from __future__ import annotations

import copy

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_is_fitted

from .attack import AttackObjective, PatchTrainingConfig, evaluate_attack, train_patch
from .config import ModelConfig
from .defense import DefenseConfig, adversarial_train
from .flops import static_flops, trace_flops
from .patch import apply_patch
from .training import TrainConfig, predict_logits, train_model
from .validation import check_images, check_labels
from .vit import AdaptiveViT


class AdaptiveViTClassifier(ClassifierMixin, BaseEstimator):
    """Input-adaptive vision transformer classifier.

    Parameters
    ----------
    policy : {"none", "avit", "ats", "adavit"}
        Adaptive computation policy. ``"ats"`` trains a plain backbone and
        switches token sampling on afterwards.
    policy_params : dict or params record, optional
        Policy hyperparameters; defaults of the policy's record otherwise.
    epochs, batch_size, lr, weight_decay : training schedule.
    random_state : int
        Seeds initialization and minibatch order.

    Attributes
    ----------
    model_ : AdaptiveViT
    classes_ : ndarray of shape (n_classes,)
    history_ : dict of per-epoch loss, accuracy and mean FLOPs
    """

    def __init__(self, policy="avit", image_size=32, patch_size=8, embed_dim=64, num_layers=4,
                 num_heads=4, mlp_ratio=4.0, policy_params=None, epochs=15, batch_size=128,
                 lr=2e-3, weight_decay=0.05, random_state=0, eval_batch_size=500):
        self.policy = policy
        self.image_size = image_size
        self.patch_size = patch_size
        self.embed_dim = embed_dim
        self.num_layers = num_layers
        self.num_heads = num_heads
        self.mlp_ratio = mlp_ratio
        self.policy_params = policy_params
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.random_state = random_state
        self.eval_batch_size = eval_batch_size

    def _config(self, num_classes: int) -> ModelConfig:
        train_policy = "none" if self.policy == "ats" else self.policy
        params = copy.deepcopy(self.policy_params)
        return ModelConfig(image_size=self.image_size, patch_size=self.patch_size,
                           embed_dim=self.embed_dim, num_layers=self.num_layers,
                           num_heads=self.num_heads, mlp_ratio=self.mlp_ratio,
                           num_classes=num_classes, adaptive_policy=train_policy,
                           policy_params=None if self.policy == "ats" else params)

    def fit(self, X, y):
        X = check_images(X, self.image_size)
        y_raw = np.asarray(y)
        self.classes_ = np.unique(y_raw)
        y_idx = check_labels(np.searchsorted(self.classes_, y_raw), len(X))
        torch.manual_seed(self.random_state)
        model = AdaptiveViT(self._config(len(self.classes_)))
        self.history_ = train_model(model, X, y_idx, TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
            weight_decay=self.weight_decay, seed=self.random_state))
        if self.policy == "ats":
            model = model.with_policy("ats", copy.deepcopy(self.policy_params))
        self.model_ = model
        return self

    @classmethod
    def from_model(cls, model: AdaptiveViT, classes=None) -> "AdaptiveViTClassifier":
        """Wrap an already trained model."""
        c = model.config
        est = cls(policy=c.adaptive_policy, image_size=c.image_size, patch_size=c.patch_size,
                  embed_dim=c.embed_dim, num_layers=c.num_layers, num_heads=c.num_heads,
                  mlp_ratio=c.mlp_ratio, policy_params=c.policy_params)
        est.model_ = model
        est.classes_ = np.arange(c.num_classes) if classes is None else np.asarray(classes)
        return est

    def with_policy(self, policy: str, policy_params=None) -> "AdaptiveViTClassifier":
        """Same weights, another policy (e.g. token sampling on a plain backbone)."""
        check_is_fitted(self, "model_")
        return type(self).from_model(self.model_.with_policy(policy, policy_params), self.classes_)

    def predict_proba(self, X, patch=None):
        check_is_fitted(self, "model_")
        X = check_images(X, self.image_size)
        logits, _ = predict_logits(self.model_, X, self.eval_batch_size, patch)
        return torch.softmax(logits, -1).numpy()

    def predict(self, X, patch=None):
        proba = self.predict_proba(X, patch)
        return self.classes_[proba.argmax(1)]

    def flops(self, X, patch=None) -> np.ndarray:
        """Per-image FLOPs of the hard-masked forward pass."""
        check_is_fitted(self, "model_")
        X = check_images(X, self.image_size)
        _, traces = predict_logits(self.model_, X, self.eval_batch_size, patch)
        return np.concatenate([trace_flops(t, self.model_.config).total for t in traces])

    def max_flops(self) -> int:
        check_is_fitted(self, "model_")
        return static_flops(self.model_.config)


def _as_model(estimator) -> tuple[AdaptiveViT, np.ndarray | None]:
    if isinstance(estimator, AdaptiveViT):
        return estimator, None
    if not hasattr(estimator, "model_"):
        raise NotFittedError("the attacked estimator must be fitted first")
    return estimator.model_, getattr(estimator, "classes_", None)


class UniversalPatchAttack(TransformerMixin, BaseEstimator):
    """Learn one patch that, pasted on any image, drives the model's objective.

    ``fit`` optimizes the patch on training images against the frozen
    ``estimator``; ``transform`` pastes it; ``evaluate`` measures compute,
    accuracy and attack success on held-out images.

    Parameters
    ----------
    estimator : AdaptiveViTClassifier (fitted) or AdaptiveViT
    objective : {"compute_only", "preserve_acc", "destroy_acc", "tap", "ntap", "random"}
    task_weight : float
        Weight of the cross-entropy term for the accuracy-controlled objectives.
    target_class : int, optional
        Target label for ``"tap"``.
    patch_size, location : patch geometry in pixels; ``location`` is (row, col).
    lr, weight_decay, batch_size, max_iter : AdamW patch optimization.
    restarts : int
        Random starts probed before the best one is optimized to ``max_iter``.
    random_state : int
    """

    def __init__(self, estimator=None, objective="compute_only", task_weight=1.0,
                 target_class=None, patch_size=8, location=(0, 0), lr=0.2, weight_decay=0.0,
                 batch_size=128, max_iter=300, restarts=4, random_state=0):
        self.estimator = estimator
        self.objective = objective
        self.task_weight = task_weight
        self.target_class = target_class
        self.patch_size = patch_size
        self.location = location
        self.lr = lr
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.max_iter = max_iter
        self.restarts = restarts
        self.random_state = random_state

    def fit(self, X, y=None):
        model, classes = _as_model(self.estimator)
        X = check_images(X, model.config.image_size)
        if y is not None:
            y = np.asarray(y)
            y = np.searchsorted(classes, y) if classes is not None else y
            y = check_labels(y, len(X))
        objective = AttackObjective(self.objective, self.task_weight, self.target_class)
        config = PatchTrainingConfig(lr=self.lr, weight_decay=self.weight_decay,
                                     batch_size=self.batch_size, iterations=self.max_iter,
                                     restarts=self.restarts, seed=self.random_state)
        self.patch_, self.loss_history_ = train_patch(model, X, y, objective, self.patch_size,
                                                      tuple(self.location), config)
        return self

    def transform(self, X):
        check_is_fitted(self, "patch_")
        X = check_images(X)
        with torch.no_grad():
            out = apply_patch(X, self.patch_)
        return out.numpy().astype(np.uint8)

    def evaluate(self, X, y=None, label=None, flops_min=None, flops_max=None):
        check_is_fitted(self, "patch_")
        model, classes = _as_model(self.estimator)
        X = check_images(X, model.config.image_size)
        if y is not None:
            y = np.asarray(y)
            y = check_labels(np.searchsorted(classes, y) if classes is not None else y, len(X))
        return evaluate_attack(model, self.patch_, X, y, label=label or self.objective,
                               flops_min=flops_min, flops_max=flops_max)

    def score(self, X, y=None):
        """Attack success on ``X``."""
        return self.evaluate(X, y).attack_success


class PatchAdversarialTraining(BaseEstimator):
    """Harden a fitted classifier against universal compute patches.

    ``fit`` fine-tunes a copy of ``estimator`` with pool patches pasted on
    every minibatch, refreshing the pool ``refreshes_per_epoch`` times per
    epoch with patches trained for ``budget_iterations`` steps.

    Attributes
    ----------
    estimator_ : AdaptiveViTClassifier, the defended copy
    pool_ : PatchPool
    """

    def __init__(self, estimator=None, objective="compute_only", patch_size=8, location=(0, 0),
                 epochs=2, refreshes_per_epoch=5, budget_iterations=500, patch_lr=0.8,
                 lr=5e-4, batch_size=128, weight_decay=0.05, random_state=0):
        self.estimator = estimator
        self.objective = objective
        self.patch_size = patch_size
        self.location = location
        self.epochs = epochs
        self.refreshes_per_epoch = refreshes_per_epoch
        self.budget_iterations = budget_iterations
        self.patch_lr = patch_lr
        self.lr = lr
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.random_state = random_state

    def fit(self, X, y):
        model, classes = _as_model(self.estimator)
        model = copy.deepcopy(model)
        X = check_images(X, model.config.image_size)
        y = np.asarray(y)
        y = check_labels(np.searchsorted(classes, y) if classes is not None else y, len(X))
        defense = DefenseConfig(epochs=self.epochs, refreshes_per_epoch=self.refreshes_per_epoch,
                                budget_iterations=self.budget_iterations,
                                patch_lr=self.patch_lr, seed=self.random_state)
        train_cfg = TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                                weight_decay=self.weight_decay, seed=self.random_state)
        model, self.pool_, self.history_ = adversarial_train(
            model, X, y, AttackObjective(self.objective), self.patch_size, tuple(self.location),
            defense, train_cfg)
        self.estimator_ = AdaptiveViTClassifier.from_model(model, classes)
        return self
