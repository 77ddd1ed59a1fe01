import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_images, tiny_model
from energypatch.ats import (ats_attack_loss, ats_layer_loss, inverse_transform_sample,
                             significance_scores)
from energypatch.config import AtsParams
from energypatch.exceptions import ContractError
from energypatch.vit import ComputeTrace


def _t(values):
    return torch.tensor(values, dtype=torch.float64)


def test_scores_symmetric():
    s, fb = significance_scores(_t([0.2, 0.4, 0.4]), _t([1.0, 1.0, 1.0]))
    assert s.tolist() == pytest.approx([0.5, 0.5])
    assert not bool(fb)


def test_scores_weighted_example():
    s, _ = significance_scores(_t([0.2, 0.2, 0.6]), _t([3.0, 1.0, 0.5]))
    assert s.tolist() == pytest.approx([0.4, 0.6])


def test_scores_fallback_when_class_attends_itself():
    s, fb = significance_scores(_t([1.0, 0.0, 0.0, 0.0]), _t([1.0, 2.0, 2.0, 2.0]))
    assert bool(fb)
    assert s.tolist() == pytest.approx([1 / 3] * 3)


@settings(max_examples=50)
@given(st.lists(st.floats(0.0, 1.0), min_size=3, max_size=10),
       st.lists(st.floats(0.1, 5.0), min_size=10, max_size=10))
def test_scores_are_a_distribution(att, norms):
    s, _ = significance_scores(_t(att), _t(norms[:len(att)]))
    assert (s >= 0).all()
    assert float(s.sum()) == pytest.approx(1.0)


def test_uniform_scores_keep_everything():
    keep = inverse_transform_sample(torch.full((6,), 1 / 6, dtype=torch.float64), 6)
    assert keep.all()


def test_one_hot_keeps_two():
    keep = inverse_transform_sample(_t([0.0, 0.0, 1.0, 0.0]), 4)
    assert keep.tolist() == [True, False, False, True, False]


def test_cdf_walk_example():
    keep = inverse_transform_sample(_t([0.5, 0.25, 0.25]), 4)
    assert keep.tolist() == [True, True, True, True]
    keep = inverse_transform_sample(_t([0.5, 0.25, 0.25, 0.0]), 4)
    assert torch.nonzero(keep).flatten().tolist() == [0, 1, 2, 3]


def _bruteforce_keep(scores, n):
    total = sum(scores)
    kept = {0}
    for k in range(1, n + 1):
        u = (k - 0.5) / n
        run = 0.0
        for j, s in enumerate(scores):
            run += s / total
            if run >= u - 1e-12:
                kept.add(j + 1)
                break
    return kept


@settings(max_examples=80)
@given(st.lists(st.floats(0.01, 1.0), min_size=1, max_size=12), st.integers(1, 12))
def test_sampling_matches_cdf_walk(scores, n):
    keep = inverse_transform_sample(_t(scores), n)
    assert set(torch.nonzero(keep).flatten().tolist()) == _bruteforce_keep(scores, n)
    assert keep[0]
    assert int(keep.sum()) <= n + 1


def test_layer_loss_one_hot():
    attn = _t([1.0, 0.0, 0.0, 0.0]).view(1, 1, 4)
    assert float(ats_layer_loss(attn)) == pytest.approx(3 * 0.25**2)
    uniform = torch.full((1, 2, 4), 0.25, dtype=torch.float64)
    assert float(ats_layer_loss(uniform)) == 0.0


def test_weighted_layer_sum():
    def attn_for(loss):
        # one head over N=2: only the non-class slot counts, (a - 1/2)^2 = loss
        a = 0.5 + loss**0.5
        row = _t([1 - a, a]).view(1, 1, 1, 2).expand(1, 1, 2, 2)
        return row

    trace = ComputeTrace("ats")
    trace.attentions = [attn_for(0.1), attn_for(0.5)]
    trace.token_masks = [torch.ones(1, 2, dtype=torch.bool)] * 2
    params = AtsParams(ats_layers=(1, 2), layer_loss_weights=(1.0, 0.2))
    assert float(ats_attack_loss(trace, params)) == pytest.approx(1.0 * 0.1 + 0.2 * 0.5)


def test_missing_layer_raises():
    trace = ComputeTrace("ats")
    trace.attentions = [torch.zeros(1, 1, 2, 2)]
    trace.token_masks = [torch.ones(1, 2, dtype=torch.bool)]
    with pytest.raises(ContractError):
        ats_attack_loss(trace, AtsParams(ats_layers=(1, 2)))


def test_model_sampling_only_drops_and_keeps_class():
    model = tiny_model("ats", layers=4, grid=4, patch=2, params=AtsParams(ats_layers=(1, 2, 3)))
    _, trace = model(random_images(5, model.config.image_size))
    for prev, cur in zip(trace.token_masks, trace.token_masks[1:]):
        assert not (cur & ~prev).any()
        assert cur[:, 0].all()
    for layer, keep in trace.sampled.items():
        if layer < 4:
            assert torch.equal(keep, trace.token_masks[layer])
