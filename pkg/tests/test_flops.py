import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import masked_forward, random_images, tiny_model
from energypatch.exceptions import ContractError, DomainError
from energypatch.flops import (PARTS, attack_success, block_breakdown, block_flops, static_flops,
                               trace_flops)
from reference import reference_forward


def test_block_flops_unit_instance():
    parts = block_breakdown(1, 1, 1, 1, mlp_ratio=1.0)
    # fc1 and fc2 are one multiply each at n = d = r = 1
    assert parts == {"qkv": 6, "attn_logits": 2, "attn_apply": 2, "out_proj": 2, "mlp": 4}
    assert block_flops(1, 1, 1, 1, mlp_ratio=1.0) == 16


def test_block_off_costs_nothing():
    assert block_flops(17, 64, 4, 4, block_on=False) == 0


def test_block_needs_a_token():
    with pytest.raises(DomainError):
        block_flops(0, 8, 1, 1)


@given(st.integers(1, 60), st.sampled_from([8, 16, 64]), st.integers(1, 4))
def test_superlinear_in_tokens(n, d, heads):
    assert block_flops(2 * n, d, heads, 4) > 2 * block_flops(n, d, heads, 4)


@given(st.integers(1, 40), st.integers(1, 40), st.integers(0, 4), st.integers(0, 4))
def test_monotone_in_tokens_and_heads(n1, n2, h1, h2):
    lo_n, hi_n = sorted((n1, n2))
    lo_h, hi_h = sorted((h1, h2))
    assert block_flops(lo_n, 32, lo_h, 4) <= block_flops(hi_n, 32, hi_h, 4)


@pytest.mark.parametrize("args,expected", [
    ((1.3, 0.87, 1.3), 1.00),
    ((4.0, 3.1, 4.6), 0.60),
    ((0.83, 0.84, 1.3), -0.02),
    ((15.4, 12.6, 17.6), 0.56),
    ((3.2, 2.25, 4.6), 0.40),
])
def test_attack_success_reported_values(args, expected):
    assert round(attack_success(*args), 2) == pytest.approx(expected)


def test_attack_success_interval_under_input_rounding():
    # inputs rounded to one decimal bound the metric to [0.54, 0.58] here
    lo = attack_success(15.35, 12.65, 17.65)
    hi = attack_success(15.45, 12.55, 17.55)
    assert 0.53 < lo < hi < 0.59


def test_attack_success_zero_and_errors():
    assert attack_success(2.0, 2.0, 5.0) == 0.0
    with pytest.raises(DomainError):
        attack_success(1.0, 2.0, 2.0)


@given(st.floats(0.1, 10), st.floats(0.1, 10), st.floats(0.1, 10), st.floats(1e-3, 1e3))
def test_attack_success_affine_invariant(a, lo, span, c):
    hi = lo + span
    assert attack_success(c * a, c * lo, c * hi) == pytest.approx(attack_success(a, lo, hi),
                                                                    rel=1e-9, abs=1e-9)


@given(st.floats(0, 10), st.floats(0.1, 10))
def test_attack_success_one_at_max(lo, span):
    assert attack_success(lo + span, lo, lo + span) == pytest.approx(1.0)


GRID = list(itertools.product([1, 2, 4], [8, 16, 32], [2, 5, 17]))


def _geometry(tokens):
    return {2: 1, 5: 2, 17: 4}[tokens]


@pytest.mark.parametrize("layers,dim,tokens", GRID)
def test_ledger_matches_bruteforce_counter(layers, dim, tokens):
    """Exact FLOPs agreement with an independent multiply counter under random masks."""
    model = tiny_model(layers=layers, dim=dim, heads=2, grid=_geometry(tokens), patch=2,
                       seed=layers * 100 + dim + tokens)
    c = model.config
    rng = np.random.default_rng(layers * 1000 + dim * 10 + tokens)
    image = random_images(1, c.image_size, seed=tokens)
    token_masks, head_masks, block_on = [], [], []
    for _ in range(layers):
        tm = rng.random(tokens) < 0.6
        tm[0] = True
        token_masks.append(tm)
        head_masks.append((rng.random(c.num_heads) < 0.7).astype(float))
        block_on.append(bool(rng.random() < 0.8))
    logits, trace = masked_forward(model, image, token_masks, head_masks, block_on)
    ref_logits, counter = reference_forward(model, image[0], token_masks, head_masks, block_on)
    assert int(trace_flops(trace, c).total[0]) == counter.flops
    np.testing.assert_allclose(logits[0].detach().numpy(), ref_logits, rtol=1e-9, atol=1e-9)


@pytest.mark.parametrize("layers", [1, 2, 4])
def test_unmasked_equals_static_count(layers):
    model = tiny_model(layers=layers, dim=16, grid=2)
    n = model.config.num_tokens
    on = [np.ones(n, bool)] * layers
    heads = [np.ones(model.config.num_heads)] * layers
    image = random_images(1, model.config.image_size)
    _, trace = masked_forward(model, image, on, heads, [True] * layers)
    _, counter = reference_forward(model, image[0], on, heads, [True] * layers)
    assert int(trace_flops(trace, model.config).total[0]) == static_flops(model.config) == counter.flops


def test_class_only_layers_cost_single_token():
    model = tiny_model(layers=3, dim=16, grid=2)
    c = model.config
    n = c.num_tokens
    only_cls = np.zeros(n, bool)
    only_cls[0] = True
    masks = [np.ones(n, bool), only_cls, only_cls]
    heads = [np.ones(c.num_heads)] * 3
    _, trace = masked_forward(model, random_images(1, c.image_size), masks, heads, [True] * 3)
    report = trace_flops(trace, c)
    single = block_flops(1, c.embed_dim, c.num_heads, c.num_heads, c.mlp_ratio)
    assert list(report.per_layer[0, 1:]) == [single, single]


def test_all_blocks_off_leaves_embed_and_head():
    model = tiny_model(layers=2, dim=16, grid=2)
    c = model.config
    on = [np.ones(c.num_tokens, bool)] * 2
    _, trace = masked_forward(model, random_images(1, c.image_size), on,
                              [np.ones(c.num_heads)] * 2, [False, False])
    report = trace_flops(trace, c)
    assert report.total[0] == report.breakdown["embed"][0] + report.breakdown["head"][0]


def test_report_serialization():
    model = tiny_model(layers=2, dim=16, grid=2)
    _, trace = model(random_images(3, model.config.image_size))
    report = trace_flops(trace, model.config)
    d = json.loads(report.to_json())
    assert d["total"] == [int(t) for t in report.total]
    assert all(sum(d["breakdown"][k][i] for k in PARTS) == d["total"][i] for i in range(3))
    rows = report.to_csv().strip().splitlines()
    assert rows[0].split(",") == ["image", *PARTS, "total"]
    assert len(rows) == 4


def test_trace_config_mismatch():
    model = tiny_model(layers=2, dim=16, grid=2)
    _, trace = model(random_images(1, model.config.image_size))
    other = tiny_model(layers=3, dim=16, grid=2).config
    with pytest.raises(ContractError):
        trace_flops(trace, other)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 5), min_size=2, max_size=2), st.integers(0, 4))
def test_trace_flops_monotone_in_retained_tokens(counts, extra):
    model = tiny_model(layers=2, dim=8, grid=2)
    c = model.config

    def mask(k):
        m = np.zeros(c.num_tokens, bool)
        m[:k] = True
        return m

    heads = [np.ones(c.num_heads)] * 2
    img = random_images(1, c.image_size)
    _, small = masked_forward(model, img, [mask(k) for k in counts], heads, [True, True])
    bigger = [min(c.num_tokens, counts[0] + extra), counts[1]]
    _, large = masked_forward(model, img, [mask(k) for k in bigger], heads, [True, True])
    assert trace_flops(small, c).total[0] <= trace_flops(large, c).total[0]


def test_default_static_count():
    from energypatch.config import ModelConfig
    c = ModelConfig()
    assert static_flops(c) == 7_375_104
