import numpy as np
import pytest
import torch

from energypatch.config import ModelConfig
from energypatch.vit import AdaptiveViT, ComputeTrace, TokenState

ACCEPTANCE_LINES = []


def tiny_config(policy="none", layers=2, dim=16, heads=2, grid=2, patch=4, classes=5, params=None):
    return ModelConfig(image_size=grid * patch, patch_size=patch, embed_dim=dim, num_layers=layers,
                       num_heads=heads, num_classes=classes, adaptive_policy=policy,
                       policy_params=params)


def tiny_model(policy="none", seed=0, dtype=torch.float64, **kw):
    torch.manual_seed(seed)
    model = AdaptiveViT(tiny_config(policy, **kw)).to(dtype)
    # larger weights than the training init so masks and attention matter
    with torch.no_grad():
        for p in model.parameters():
            p.add_(0.3 * torch.randn_like(p))
    return model.eval()


def random_images(n, size, seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    return torch.randint(0, 256, (n, size, size, 3), generator=g).to(dtype)


def masked_forward(model, images, token_masks, head_masks, block_on):
    """Run the blocks with explicit masks; returns ``(logits, trace)``."""
    state = model.patch_embed(images)
    trace = ComputeTrace("none")
    b = images.shape[0]
    for layer in range(model.config.num_layers):
        active = torch.as_tensor(np.asarray(token_masks[layer]), dtype=torch.bool).expand(b, -1)
        hm = torch.as_tensor(np.asarray(head_masks[layer]), dtype=images.dtype).expand(b, -1)
        bo = torch.as_tensor(float(block_on[layer]), dtype=images.dtype).expand(b)
        state = TokenState(state.embeddings, active)
        state, entry = model.block_forward(state, layer, head_mask=hm, block_on=bo)
        trace.token_masks.append(active)
        trace.attentions.append(entry.attention)
        trace.head_masks.append(hm)
        trace.block_masks.append(bo)
    trace.logits = model.classify(state)
    return trace.logits, trace


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
