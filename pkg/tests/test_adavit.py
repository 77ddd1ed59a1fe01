import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_images, tiny_model
from energypatch.adavit import (KeepMasks, adavit_attack_loss, decision_forward, gumbel_mask,
                                keep_rates, usage_loss)
from energypatch.exceptions import ContractError


def _masks(value, b=2, L=3, K=4, H=2):
    return KeepMasks(torch.full((b, L, K), value, dtype=torch.float64),
                     torch.full((b, L, H), value, dtype=torch.float64),
                     torch.full((b, L), value, dtype=torch.float64))


@pytest.mark.parametrize("value,gammas,expected", [
    (1.0, (1, 1, 1), 0.0),
    (1.0, (0, 0, 0), 3.0),
    (0.5, (0.5, 0.5, 0.5), 0.0),
])
def test_usage_loss(value, gammas, expected):
    assert float(usage_loss(_masks(value), gammas)) == pytest.approx(expected)


@pytest.mark.parametrize("value,expected", [(1.0, -3.0), (0.0, 0.0), (0.5, -0.75)])
def test_attack_loss_values(value, expected):
    assert float(adavit_attack_loss(_masks(value))) == pytest.approx(expected)


@settings(max_examples=50)
@given(st.integers(0, 2), st.integers(0, 23), st.floats(0, 1), st.floats(0, 1))
def test_attack_loss_monotone_in_each_entry(which, pos, base, bump):
    rng = np.random.default_rng(pos)
    m = KeepMasks(*(torch.as_tensor(rng.random(s)) for s in [(2, 3, 4), (2, 3, 2), (2, 3)]))
    field = ["patch", "head", "block"][which]
    t = getattr(m, field).reshape(-1)
    i = pos % t.numel()
    lo = t.clone()
    lo[i] = min(base, 1.0)
    hi = t.clone()
    hi[i] = min(base + bump, 1.0)
    shape = getattr(m, field).shape

    def with_field(v):
        parts = {"patch": m.patch, "head": m.head, "block": m.block}
        parts[field] = v.view(shape)
        return KeepMasks(**parts)

    assert float(adavit_attack_loss(with_field(hi))) <= float(adavit_attack_loss(with_field(lo))) + 1e-12


def test_zero_weights_give_half_probability():
    z = torch.randn(3, 5, 8, dtype=torch.float64)
    mp, mh, mb = decision_forward(z, torch.zeros(1, 8, dtype=torch.float64),
                                  torch.zeros(4, 8, dtype=torch.float64),
                                  torch.zeros(1, 8, dtype=torch.float64))
    for m in (mp, mh, mb):
        assert torch.sigmoid(m).eq(0.5).all()


def test_decision_logits_match_dense_product():
    rng = np.random.default_rng(1)
    z = rng.normal(size=(2, 5, 8))
    wp, wh, wb = rng.normal(size=(1, 8)), rng.normal(size=(3, 8)), rng.normal(size=(1, 8))
    mp, mh, mb = decision_forward(*(torch.as_tensor(a) for a in (z, wp, wh, wb)))
    np.testing.assert_allclose(mp.numpy(), np.einsum("bnd,d->bn", z, wp[0]))
    np.testing.assert_allclose(mh.numpy(), np.einsum("bd,hd->bh", z[:, 0], wh))
    np.testing.assert_allclose(mb.numpy(), z[:, 0] @ wb[0])


def test_decision_shape_mismatch():
    z = torch.zeros(1, 3, 8)
    with pytest.raises(ContractError):
        decision_forward(z, torch.zeros(1, 4), torch.zeros(2, 8), torch.zeros(1, 8))


def test_gumbel_saturation_and_determinism():
    logits = torch.full((50,), 20.0, dtype=torch.float64)
    assert gumbel_mask(logits, temperature=1e-3, seed=0).min() > 0.999
    a = gumbel_mask(torch.zeros(100, dtype=torch.float64), seed=7)
    b = gumbel_mask(torch.zeros(100, dtype=torch.float64), seed=7)
    assert torch.equal(a, b)
    assert not torch.equal(a, gumbel_mask(torch.zeros(100, dtype=torch.float64), seed=8))


def test_straight_through_gradient_equals_soft():
    base = torch.linspace(-2, 2, 9, dtype=torch.float64)
    grads = []
    for hard in (False, True):
        m = base.clone().requires_grad_(True)
        out = gumbel_mask(m, 0.7, hard=hard, seed=3)
        (out * torch.arange(9.0, dtype=torch.float64)).sum().backward()
        grads.append(m.grad)
        if hard:
            assert set(out.detach().unique().tolist()) <= {0.0, 1.0}
    torch.testing.assert_close(grads[0], grads[1])


def test_model_hard_trace_and_class_token():
    model = tiny_model("adavit", layers=3, grid=2)
    x = random_images(4, model.config.image_size)
    _, t1 = model(x, hard=True, seed=5)
    _, t2 = model(x, hard=True, seed=5)
    for a, b in zip(t1.token_masks, t2.token_masks):
        assert torch.equal(a, b)
        assert a[:, 0].all()
    for hm in t1.head_masks:
        assert set(hm.unique().tolist()) <= {0.0, 1.0}
    rates = keep_rates(t1.keep_masks)
    assert all(0.0 <= r <= 1.0 for r in rates)
