import numpy as np
import pytest
import torch

from conftest import random_images, tiny_model
from energypatch.attack import AttackObjective, PatchTrainingConfig
from energypatch.config import HaltingParams
from energypatch.defense import (DefenseConfig, PatchPool, adversarial_train, refresh_pool,
                                 refresh_steps, sample_patch)
from energypatch.exceptions import ContractError
from energypatch.patch import Patch, init_patch
from energypatch.training import TrainConfig
from energypatch.validation import derive_seed

HP = HaltingParams(gate_gain=2.0, gate_bias=-1.0)


def _pool(n, size=4):
    pool = PatchPool(size, (0, 0))
    for i in range(n):
        pool.add(init_patch(size, seed=i), epoch_fraction=i / 5, iterations=i)
    return pool


def test_single_patch_pool_always_returns_it():
    pool = _pool(1)
    rng = np.random.default_rng(0)
    assert all(sample_patch(pool, rng) is pool.entries[0].patch for _ in range(20))


def test_sampling_is_uniform():
    n = 6
    pool = _pool(n)
    rng = np.random.default_rng(1)
    ids = {id(e.patch): i for i, e in enumerate(pool.entries)}
    draws = 10 * n * 100
    counts = np.bincount([ids[id(sample_patch(pool, rng))] for _ in range(draws)], minlength=n)
    p = 1 / n
    sigma = np.sqrt(draws * p * (1 - p))
    assert np.all(np.abs(counts - draws * p) < 3 * sigma)
    chi2 = ((counts - draws * p) ** 2 / (draws * p)).sum()
    assert chi2 < 20.5  # 99.9% quantile at 5 degrees of freedom


def test_sampling_seeded_and_empty_pool():
    pool = _pool(5)
    assert sample_patch(pool, 3) is sample_patch(pool, 3)
    with pytest.raises(ContractError):
        sample_patch(PatchPool(4), 0)


def test_refresh_marks():
    assert refresh_steps(1000) == [200, 400, 600, 800, 1000]
    assert refresh_steps(40, 0) == []
    assert refresh_steps(2) == [1, 1, 1, 2, 2]


def test_pool_geometry_enforced():
    pool = PatchPool(4, (0, 0))
    with pytest.raises(ContractError):
        pool.add(init_patch(5))
    with pytest.raises(ContractError):
        pool.add(init_patch(4, (1, 1)))


def test_pool_is_append_only():
    patch = init_patch(4, seed=0)
    pool = PatchPool(4)
    pool.add(patch)
    patch.pixels.fill_(0)
    assert pool.entries[0].patch.pixels.sum() > 0
    assert isinstance(pool.entries, tuple)


def test_pool_persistence(tmp_path):
    pool = _pool(3)
    pool.save(tmp_path / "pool")
    assert (tmp_path / "pool" / "manifest.json").exists()
    loaded = PatchPool.load(tmp_path / "pool")
    assert len(loaded) == 3 and loaded.size == 4 and loaded.location == (0, 0)
    for a, b in zip(pool.entries, loaded.entries):
        assert torch.equal(a.patch.pixels, b.patch.pixels.to(a.patch.pixels.dtype))
        assert (a.epoch_fraction, a.iterations) == (b.epoch_fraction, b.iterations)


@pytest.fixture
def data():
    model = tiny_model("avit", layers=2, grid=2, patch=4, params=HP, dtype=torch.float32)
    x = random_images(64, 8, dtype=torch.float32)
    y = torch.arange(64) % model.config.num_classes
    return model, x, y


def test_zero_budget_refresh_appends_init(data):
    model, x, y = data
    pool = PatchPool(4)
    cfg = PatchTrainingConfig(seed=17)
    refresh_pool(model, x, y, pool, AttackObjective(), budget_iterations=0, config=cfg)
    expected = init_patch(4, seed=derive_seed(17, "patch-init"))
    assert torch.equal(pool.entries[0].patch.pixels, expected.pixels)


def test_refresh_leaves_model_untouched(data):
    model, x, y = data
    before = model.checksum()
    pool = PatchPool(4)
    refresh_pool(model, x, y, pool, AttackObjective(), budget_iterations=3,
                 config=PatchTrainingConfig(batch_size=16))
    assert model.checksum() == before
    assert pool.entries[0].patch.meta["model_checksum"] == before


def test_pool_grows_five_per_epoch(data):
    model, x, y = data
    cfg = DefenseConfig(epochs=2, budget_iterations=2, patch_batch_size=16)
    _, pool, history = adversarial_train(model, x, y, AttackObjective(), 4, (0, 0), cfg,
                                         TrainConfig(epochs=2, batch_size=8, lr=1e-3))
    assert len(pool) == 1 + 5 * 2
    fractions = [e.epoch_fraction for e in pool.entries[1:]]
    assert fractions == sorted(fractions) and fractions[4] == 1.0 and fractions[-1] == 2.0
    assert len(history["loss"]) == 2
    first = init_patch(4, seed=derive_seed(cfg.seed, "pool-init"))
    assert torch.equal(pool.entries[0].patch.pixels, first.pixels)


def test_fixed_zero_patch_acts_as_occluder(data):
    model, x, y = data
    pool = PatchPool(4)
    pool.add(Patch(torch.zeros(4, 4, 3), (0, 0)))
    seen = []
    model.register_forward_pre_hook(lambda m, args: seen.append(args[0][:, :4, :4].abs().sum()))
    cfg = DefenseConfig(epochs=1, refreshes_per_epoch=0)
    adversarial_train(model, x, y, AttackObjective(), 4, (0, 0), cfg,
                      TrainConfig(epochs=1, batch_size=16, erase_prob=0.0), pool=pool)
    assert len(pool) == 1 and seen and all(float(s) == 0 for s in seen)
