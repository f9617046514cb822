import io
import json

import numpy as np
import pytest

from toys import TOY_LAYERS, toy_dataset, trained_toy
from vebm.checkpoint import dumps, loads
from vebm.data import Dataset
from vebm.energy import DescriptorModel
from vebm.generator import GeneratorModel
from vebm.gridops import GridScaler
from vebm.langevin import LangevinConfig
from vebm.layers import RELU, TANH, conv, deconv, fc
from vebm.training import (
    CoopTrainer,
    MLETrainer,
    MultiGridTrainer,
    RecoveryTrainer,
    SuperResTrainer,
    TrainConfig,
    mle_grad,
    recover,
    sample_multigrid,
    superres,
)

GEN8 = [fc(2 * 4**3, reshape=(2, 4, 4, 4)), deconv(1, 2, 2), TANH]
COARSE4 = [conv(2, 2, 1), RELU, fc(1, bias=False)]


def _cfg(**kw):
    base = dict(iterations=4, lr=0.003, batch_size=4, chains=4, langevin=LangevinConfig(0.01, 3), noise_off_after=None)
    base.update(kw)
    return TrainConfig(**base)


def _desc(seed=0, layers=TOY_LAYERS, grid=(8, 8, 8)):
    return DescriptorModel.create(layers, grid, rng=np.random.default_rng(seed))


def _make(kind, **kw):
    data = toy_dataset()
    if kind == "mle":
        return MLETrainer(data, _desc(), _cfg(**kw))
    if kind == "recovery":
        return RecoveryTrainer(data, _desc(), _cfg(**kw))
    if kind == "superres":
        return SuperResTrainer(data, _desc(), _cfg(**kw))
    if kind == "multigrid":
        return MultiGridTrainer(data, [_desc(1, COARSE4, (4, 4, 4)), _desc(2)], _cfg(factors=(4, 2), **kw))
    gen = GeneratorModel.create(GEN8, 3, (8, 8, 8), rng=np.random.default_rng(3), init_std=0.1)
    return CoopTrainer(data, _desc(), gen, _cfg(**kw))


KINDS = ["mle", "recovery", "superres", "multigrid", "coop"]


def _params(tr):
    if isinstance(tr, MultiGridTrainer):
        return {f"{i}/{k}": v for i, m in enumerate(tr.models) for k, v in m.params.items()}
    out = dict(tr.model.params)
    if isinstance(tr, CoopTrainer):
        out.update({f"gen/{k}": v for k, v in tr.generator.params.items()})
    return out


# ---------------------------------------------------------------- gradient


def test_mle_grad_equal_batches_cancel_exactly():
    m = trained_toy()
    B = toy_dataset().grids[:4]
    grads, stats = mle_grad(m, B, B)
    assert all(np.all(g == 0) for g in grads.values())
    assert stats["energy_obs"] == stats["energy_syn"]


def test_mle_grad_linear_score():
    # f(Y) = w·Y, so ∂f/∂w = Y and the gradient is the difference of batch means
    m = DescriptorModel.create([fc(1, bias=False)], (2, 2, 2), rng=np.random.default_rng(0))
    rng = np.random.default_rng(1)
    obs = rng.standard_normal((5, 2, 2, 2)).astype(np.float32)
    syn = rng.standard_normal((3, 2, 2, 2)).astype(np.float32)
    grads, _ = mle_grad(m, obs, syn)
    expect = obs.reshape(5, -1).mean(0) - syn.reshape(3, -1).mean(0)
    np.testing.assert_allclose(grads["0.weight"][0], expect, atol=1e-6)


def test_mle_grad_validation():
    m = trained_toy()
    with pytest.raises(ValueError):
        mle_grad(m, np.zeros((0, 8, 8, 8)), np.zeros((1, 8, 8, 8)))
    with pytest.raises(ValueError):
        mle_grad(m, np.zeros((1, 8, 8, 8)), np.zeros((1, 4, 4, 4)))


# ---------------------------------------------------------------- trainer behaviour


@pytest.mark.parametrize("kind", KINDS)
def test_zero_lr_leaves_params_unchanged(kind):
    tr = _make(kind, lr=0.0, gen_lr=0.0)
    before = {k: v.copy() for k, v in _params(tr).items()}
    tr.run(2)
    after = _params(tr)
    assert all(np.array_equal(before[k], after[k]) for k in before)


@pytest.mark.parametrize("kind", KINDS)
def test_zero_iterations_is_identity(kind):
    tr = _make(kind, iterations=0)
    before = {k: v.copy() for k, v in _params(tr).items()}
    tr.run()
    assert tr.iteration == 0 and not tr.history
    assert all(np.array_equal(before[k], v) for k, v in _params(tr).items())


@pytest.mark.parametrize("kind", KINDS)
def test_resume_equals_uninterrupted(kind):
    full = _make(kind)
    full.run(4)
    part = _make(kind)
    part.run(2)
    _, state = loads(dumps({}, part.state_dict()))
    resumed = _make(kind)
    resumed.load_state_dict(state)
    resumed.run(2)
    a, b = _params(full), _params(resumed)
    assert set(a) == set(b)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert dumps({}, full.state_dict()) == dumps({}, resumed.state_dict())


def test_kind_mismatch_rejected():
    state = _make("mle").state_dict()
    with pytest.raises(ValueError):
        _make("recovery").load_state_dict(state)


def test_value_is_energy_gap_and_log_stream():
    log = io.StringIO()
    tr = MLETrainer(toy_dataset(), _desc(), _cfg(), log=log)
    tr.run(2)
    lines = [json.loads(l) for l in log.getvalue().splitlines()]
    assert [r["iteration"] for r in lines] == [1, 2]
    for r in lines:
        assert r["value"] == pytest.approx(r["energy_syn"] - r["energy_obs"])
        assert r["mode"] == "mle" and r["grad_norm"] >= 0


def test_batches_cover_each_epoch():
    tr = _make("mle", batch_size=4)
    seen = np.concatenate([tr.batch_indices(t)[0] for t in range(3)])  # 12 shapes, 3 batches per epoch
    assert sorted(seen) == list(range(12))
    assert not np.array_equal(tr.batch_indices(0)[0], tr.batch_indices(3)[0])


def test_noise_schedule():
    tr = _make("mle", noise_off_after=2)
    assert tr.noise_on(1) and not tr.noise_on(2)
    assert not _make("mle", langevin=LangevinConfig(0.01, 3, noise=False)).noise_on(0)


def test_data_init_chains():
    tr = _make("mle", chain_init="data-init")
    tr.run(1)
    with pytest.raises(ValueError):
        _make("mle", chain_init="coarser-grid-init")


# ---------------------------------------------------------------- recovery and super-resolution


def test_recovery_without_corruption_is_frozen():
    tr = _make("recovery", corruption=0.0)
    before = {k: v.copy() for k, v in tr.model.params.items()}
    rec = tr.step()
    assert rec["grad_norm"] == 0.0
    assert all(np.array_equal(before[k], v) for k, v in tr.model.params.items())


def test_recover_keeps_observed_and_empty_mask_is_identity():
    m = trained_toy()
    Y = toy_dataset().grids[:2]
    cfg = LangevinConfig(0.01, 5, noise=False)
    np.testing.assert_array_equal(recover(m, Y, np.zeros((8, 8, 8), bool), cfg), Y)
    mask = np.zeros((8, 8, 8), bool)
    mask[:4] = True
    out = recover(m, Y[0], mask, cfg)
    np.testing.assert_array_equal(out[~mask], Y[0][~mask])
    assert out.shape == (8, 8, 8)


def test_superres_factor_one_is_identity_and_trainer_frozen():
    low = toy_dataset().grids[:2]
    np.testing.assert_array_equal(superres(trained_toy(), low, GridScaler(1), LangevinConfig(0.01, 5)), low)
    tr = _make("superres", scale_factor=1)
    assert tr.step()["grad_norm"] == 0.0


def test_superres_preserves_block_means():
    sc = GridScaler(2)
    low = sc.down(toy_dataset().grids[:3])
    out = superres(trained_toy(), low, sc, LangevinConfig(0.01, 20, noise=False))
    np.testing.assert_allclose(sc.down(out), low, atol=1e-5)


def test_superres_rejects_indivisible():
    with pytest.raises(ValueError):
        _make("superres", scale_factor=3)


# ---------------------------------------------------------------- multi-grid and cooperative


def test_multigrid_structure_and_sampling():
    tr = _make("multigrid")
    rec = tr.step()
    assert [g["size"] for g in rec["grids"]] == [4, 8]
    assert rec["value"] == rec["grids"][-1]["value"]
    levels = sample_multigrid(tr.models, tr.histogram, (4, 2), LangevinConfig(0.01, 2), n=3, seed=5)
    assert [lv.shape for lv in levels] == [(3, 1, 1, 1), (3, 4, 4, 4), (3, 8, 8, 8)]
    again = sample_multigrid(tr.models, tr.histogram, (4, 2), LangevinConfig(0.01, 2), n=3, seed=5)
    assert all(np.array_equal(a, b) for a, b in zip(levels, again))


def test_multigrid_validation():
    data = toy_dataset()
    with pytest.raises(ValueError):
        MultiGridTrainer(data, [_desc(2)], _cfg(factors=(4, 2)))
    with pytest.raises(ValueError):
        MultiGridTrainer(data, [_desc(2), _desc(2)], _cfg(factors=(4, 2)))


def test_coop_generator_frozen_with_zero_gen_lr():
    tr = _make("coop", gen_lr=0.0)
    before = {k: v.copy() for k, v in tr.generator.params.items()}
    d_before = {k: v.copy() for k, v in tr.model.params.items()}
    rec = tr.step()
    assert "gen_loss" in rec and rec["gen_loss"] >= 0
    assert all(np.array_equal(before[k], v) for k, v in tr.generator.params.items())
    assert any(not np.array_equal(d_before[k], v) for k, v in tr.model.params.items())


def test_coop_shape_mismatch():
    gen = GeneratorModel.create([fc(2 * 2**3, reshape=(2, 2, 2, 2)), deconv(1, 2, 2), TANH], 3, (4, 4, 4))
    with pytest.raises(ValueError):
        CoopTrainer(toy_dataset(), _desc(), gen, _cfg())


def test_empty_dataset_rejected():
    with pytest.raises(ValueError):
        MLETrainer(Dataset(np.zeros((0, 8, 8, 8), np.float32)), _desc(), _cfg())
