"""Training loop for the efficient backbones (plain and adversarial)."""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .exceptions import NonFiniteLossError
from .flops import trace_flops
from .validation import derive_seed
from .vit import AdaptiveViT, training_loss

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 15
    batch_size: int = 128
    lr: float = 2e-3
    weight_decay: float = 0.05
    erase_prob: float = 0.0
    decision_lr_scale: float = 10.0
    seed: int = 0

    def to_dict(self):
        return asdict(self)


def random_erase(images: torch.Tensor, rng: np.random.Generator, prob: float = 0.25,
                 scale=(0.02, 1 / 3), ratio=(0.3, 3.3)) -> torch.Tensor:
    """Replace one random rectangle per selected image with uniform noise pixels."""
    if prob <= 0:
        return images
    out = images.clone()
    _, h, w, c = images.shape
    for i in np.flatnonzero(rng.random(len(images)) < prob):
        for _ in range(10):
            area = h * w * rng.uniform(*scale)
            aspect = math.exp(rng.uniform(math.log(ratio[0]), math.log(ratio[1])))
            eh, ew = int(round(math.sqrt(area * aspect))), int(round(math.sqrt(area / aspect)))
            if 0 < eh < h and 0 < ew < w:
                top, left = rng.integers(0, h - eh + 1), rng.integers(0, w - ew + 1)
                noise = rng.integers(0, 256, size=(eh, ew, c))
                out[i, top:top + eh, left:left + ew] = torch.as_tensor(noise, dtype=out.dtype)
                break
    return out


def batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def train_model(model: AdaptiveViT, X: torch.Tensor, y: torch.Tensor, config: TrainConfig,
                transform_batch=None, on_step=None) -> dict:
    """Minimize the policy's training loss with AdamW and a cosine schedule.

    ``transform_batch(images, step)`` may rewrite each minibatch (the defense
    pastes patches there); ``on_step(step)`` runs after every optimizer step.
    On a non-finite loss the last good weights are restored before raising.
    """
    model.train()
    # the gating layers start near zero logits and need a faster schedule
    gate_ids = {id(p) for p in model.decision.parameters()} if model.decision is not None else set()
    params = [p for p in model.parameters() if p.requires_grad]
    groups = [{"params": [p for p in params if id(p) not in gate_ids]}]
    if gate_ids:
        groups.append({"params": [p for p in params if id(p) in gate_ids],
                       "lr": config.lr * config.decision_lr_scale, "weight_decay": 0.0})
    opt = torch.optim.AdamW(groups, lr=config.lr, weight_decay=config.weight_decay)
    steps_per_epoch = math.ceil(len(X) / config.batch_size)
    total = max(1, config.epochs * steps_per_epoch)
    sched = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda s: 0.5 * (1 + math.cos(math.pi * min(s, total) / total)))
    rng = np.random.default_rng(derive_seed(config.seed, "batches"))
    erase_rng = np.random.default_rng(derive_seed(config.seed, "erase"))
    dtype = next(model.parameters()).dtype
    history = {"loss": [], "accuracy": [], "mean_flops": []}
    last_good = copy.deepcopy(model.state_dict())
    step = 0
    for epoch in range(config.epochs):
        losses, correct, flops, seen = [], 0, 0.0, 0
        for idx in batches(len(X), config.batch_size, rng):
            xb = X[idx].to(dtype)
            yb = y[idx]
            if transform_batch is not None:
                xb = transform_batch(xb, step)
            xb = random_erase(xb, erase_rng, config.erase_prob)
            logits, trace = model(xb, hard=True, seed=derive_seed(config.seed, "gumbel", step))
            loss = training_loss(model, logits, yb, trace)
            if not torch.isfinite(loss):
                model.load_state_dict(last_good)
                raise NonFiniteLossError(f"non-finite training loss at step {step}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sched.step()
            step += 1
            if step % steps_per_epoch == 0:
                last_good = copy.deepcopy(model.state_dict())
            losses.append(float(loss.detach()))
            correct += int((logits.argmax(-1) == yb).sum())
            flops += float(trace_flops(trace, model.config).total.sum())
            seen += len(idx)
            if on_step is not None:
                on_step(step)
        history["loss"].append(float(np.mean(losses)))
        history["accuracy"].append(correct / seen)
        history["mean_flops"].append(flops / seen)
        log.info("epoch %d loss %.4f acc %.3f flops %.3g", epoch, history["loss"][-1],
                 history["accuracy"][-1], history["mean_flops"][-1])
    model.eval()
    return history


@torch.no_grad()
def predict_logits(model: AdaptiveViT, X: torch.Tensor, batch_size: int = 500, patch=None):
    model.eval()
    dtype = next(model.parameters()).dtype
    out, traces = [], []
    for start in range(0, len(X), batch_size):
        logits, trace = model(X[start:start + batch_size].to(dtype), patch=patch)
        out.append(logits)
        traces.append(trace)
    return torch.cat(out), traces
