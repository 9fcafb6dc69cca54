from __future__ import annotations

import csv
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bandsel import scos
from bandsel.bench import all_combinations, regret
from bandsel.search import SearchSpace
from bandsel.hsi import HsiCube

FAST = scos.ScosTrainConfig(iterations=300, batch_size=16, seed=0)


@pytest.fixture(scope="module")
def cls_data(cls_task):
    cube, labels, _ = cls_task
    return scos.make_patches(cube, labels, 3)


@pytest.fixture(scope="module")
def rec_data(rec_cube):
    return scos.make_patches(rec_cube, None, 3)


def random_params(pe, task="classification", n=16, hw=9, hidden=6, classes=4, seed=0):
    """Every parameter (fixed APE table aside) drawn at random so no structure hides bugs."""
    p = scos.init_params(pe, task, n, hw, hidden, classes, seed=seed)
    rng = np.random.default_rng(seed + 1000)
    for k, v in p.weights.items():
        p.weights[k] = rng.normal(0.0, 0.5, size=v.shape)
    return p


# ---------------------------------------------------------------- patches and embeddings


def test_transform_patch():
    spectrum = np.arange(5.0)
    np.testing.assert_array_equal(scos.transform_patch(spectrum.reshape(1, 1, 5)), spectrum[None, :])
    tp = scos.transform_patch(np.array([[1.0, 2.0], [3.0, 4.0]])[:, :, None])
    np.testing.assert_array_equal(tp, [[1.0], [2.0], [3.0], [4.0]])
    patch = np.random.default_rng(0).uniform(size=(3, 3, 4))
    tp = scos.transform_patch(patch)
    assert tp.shape == (9, 4)
    np.testing.assert_array_equal(tp.reshape(3, 3, 4), patch)
    assert tp[5, 2] == patch[1, 2, 2]
    with pytest.raises(ValueError):
        scos.transform_patch(np.zeros((3, 3)))


def test_make_patches_layout(cls_task, cls_data):
    cube, labels, _ = cls_task
    assert cls_data.x.shape == (30 * 30, 16, 9)
    # sample 0 is the window at the top-left corner; its centre pixel is (1, 1)
    np.testing.assert_allclose(cls_data.x[0][:, 4], cube.values[:, 1, 1])
    assert cls_data.y[0] == labels.labels[1, 1] - 1
    assert cls_data.num_classes == 4


def test_ape_embedding():
    e = scos.ape_embedding(16, 9)
    assert e.shape == (16, 9)
    np.testing.assert_array_equal(e[0, 0::2], 0.0)
    np.testing.assert_array_equal(e[0, 1::2], 1.0)
    assert e[1, 0] == pytest.approx(0.841471, abs=1e-6)
    assert np.all(np.abs(e) <= 1.0)
    assert np.array_equal(e, scos.ape_embedding(16, 9))
    i, j = 5, 3  # column 2j + 1 = 7
    assert e[i, 2 * j + 1] == pytest.approx(math.cos(i / 10000 ** (2 * j / 9)), abs=1e-15)
    assert e[i, 8] == pytest.approx(math.sin(i / 10000 ** (8 / 9)), abs=1e-15)


# ---------------------------------------------------------------- encode / select / forward


def encode_loop(params, x):
    """Scalar-loop evaluation of the encoder for one N x HW input."""
    p = params.all()
    n, hw = x.shape
    a = [[p["b1"][t] + sum(x[b, s] * p["W1"][s, t] for s in range(hw)) for t in range(hw)] for b in range(n)]
    out = np.zeros((n, hw))
    for b in range(n):
        for t in range(hw):
            if params.pe_kind in ("ape", "clpe"):
                out[b, t] = a[b][t] + p["E_ss"][b, t]
            elif params.pe_kind == "slpe":
                z = [a[b][s] + p["E_p"][s] for s in range(hw)]
                out[b, t] = p["b2"][t] + sum(z[s] * p["W2"][s, t] for s in range(hw)) + p["E_b"][b]
            else:
                out[b, t] = a[b][t]
    return out


@pytest.mark.parametrize("pe", scos.PE_KINDS)
def test_encode_matches_loop(pe):
    p = random_params(pe, n=5, hw=4)
    x = np.random.default_rng(3).uniform(size=(5, 4))
    np.testing.assert_allclose(scos.encode(p, x), encode_loop(p, x), atol=1e-10)


def test_encode_zero_and_linearity():
    p = scos.init_params("slpe", "classification", 6, 4, 5, 3)
    for k in p.weights:
        p.weights[k][:] = 0.0
    x = np.random.default_rng(0).uniform(size=(6, 4))
    assert np.all(scos.encode(p, x) == 0.0)
    assert np.all(scos.forward(p, x[None], (0, 2, 4)) == 0.0)
    p.weights["W1"] = np.eye(4)
    p.weights["W2"] = np.eye(4)
    p.weights["E_p"] = np.arange(4.0)
    p.weights["E_b"] = np.arange(6.0) * 10
    np.testing.assert_array_equal(scos.encode(p, np.zeros((6, 4))), np.arange(6.0)[:, None] * 10 + np.arange(4.0))
    with pytest.raises(ValueError):
        scos.encode(p, np.zeros((5, 4)))
    with pytest.raises(ValueError):
        scos.encode(p, np.zeros((6, 3)))


def test_select_encoded():
    e = np.random.default_rng(0).normal(size=(6, 4))
    np.testing.assert_array_equal(scos.select_encoded(e, range(6)), e)
    np.testing.assert_array_equal(scos.select_encoded(e, (3,)), e[3:4])
    with pytest.raises(IndexError):
        scos.select_encoded(e, (2, 6))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(0, 11), min_size=1, max_size=11, unique=True), st.integers(0, 2**31))
def test_select_rows_follow_band_order(bands, seed):
    rng = np.random.default_rng(seed)
    e = rng.normal(size=(3, 12, 5))
    bc = tuple(sorted(bands))
    m = scos.select_encoded(e, bc)
    for j, b in enumerate(bc):
        np.testing.assert_array_equal(m[:, j], e[:, b])
    # a permutation of bc permutes M's rows the same way
    perm = rng.permutation(len(bc))
    np.testing.assert_array_equal(e[:, [bc[i] for i in perm]], m[:, perm])


def test_forward_is_pure(cls_data):
    p = scos.init_params("slpe", "classification", 16, 9, 8, 4, seed=1)
    x = cls_data.x[:5].copy()
    before = p.to_json()
    a = scos.forward(p, x, (1, 4, 7))
    b = scos.forward(p, x, (1, 4, 7))
    assert np.array_equal(a, b) and a.shape == (5, 4)
    assert p.to_json() == before and np.array_equal(x, cls_data.x[:5])


def test_reconstruction_head_represents_rank_one_cube():
    """With every band selected, constant atoms spec / sum(spec) rebuild a rank-1 cube exactly."""
    rng = np.random.default_rng(0)
    spec = np.linspace(0.4, 0.9, 6)
    cube = HsiCube(spec[:, None, None] * rng.uniform(0.3, 1.0, size=(1, 5, 5)), np.linspace(400, 700, 6))
    data = scos.make_patches(cube, None, 3)
    p = scos.init_params("none", "reconstruction", 6, 9, 4)
    p.weights["W1"] = np.eye(9)
    p.weights["Wv"][:] = 0.0
    p.weights["bv"] = spec / spec.sum()
    out = scos.forward(p, data.x, tuple(range(6)))
    np.testing.assert_allclose(out, data.y, atol=1e-12)


def test_reconstruction_training_reduces_error(rec_data):
    train, val = scos.split_data(rec_data, 0.5, 0)
    p0 = scos.init_params("slpe", "reconstruction", 16, 9, 32)
    p = scos.train_one_shot(train, replace(FAST, iterations=1000, learning_rate=0.1))
    assert scos.evaluate_bc(p, val, (2, 7, 12)) > scos.evaluate_bc(p0, val, (2, 7, 12)) + 5


def test_clipping_keeps_reconstruction_stable(rec_data):
    cfg = replace(FAST, iterations=50, learning_rate=0.1)
    scos.train_one_shot(rec_data, cfg)
    with pytest.raises(scos.TrainingDiverged):
        scos.train_one_shot(rec_data, replace(cfg, clip_norm=None))


# ---------------------------------------------------------------- gradients


@pytest.mark.parametrize("pe", scos.PE_KINDS)
def test_grad_check_random_instance(pe, cls_data):
    rng = np.random.default_rng(7)
    p = scos.init_params(pe, "classification", 16, 9, 6, 4, seed=7)
    idx = rng.choice(len(cls_data), 6, replace=False)
    assert scos.grad_check(p, cls_data.x[idx], cls_data.y[idx], (0, 8, 11)) < 1e-4


@pytest.mark.parametrize("pe", scos.PE_KINDS)
def test_grad_check_linear_head_quadratic_loss(pe, rec_data):
    p = scos.init_params(pe, "reconstruction", 16, 9, 6, seed=2)
    p.weights["Wv"][:] = 0.0
    idx = np.random.default_rng(2).choice(len(rec_data), 3, replace=False)
    assert scos.grad_check(p, rec_data.x[idx], rec_data.y[idx], (2, 6, 12), loss="mse") < 1e-6


def test_grad_check_zero_gradient_point(cls_data):
    p = scos.init_params("slpe", "classification", 16, 9, 6, 4)
    for k in p.weights:
        p.weights[k][:] = 0.0
    idx = np.concatenate([np.flatnonzero(cls_data.y == c)[:2] for c in range(4)])
    x, y = cls_data.x[idx], cls_data.y[idx]
    _, grads = scos.loss_and_grad(p, x, y, (1, 5, 9))
    assert all(np.all(g == 0.0) for g in grads.values())
    err = scos.grad_check(p, x, y, (1, 5, 9))
    assert math.isfinite(err) and err < 1.0


def test_ape_table_is_not_trained(cls_data):
    p = scos.init_params("ape", "classification", 16, 9, 6, 4)
    _, grads = scos.loss_and_grad(p, cls_data.x[:4], cls_data.y[:4], (0, 1, 2))
    assert "E_ss" not in grads and "E_ss" in p.fixed


# ---------------------------------------------------------------- parameters


def test_params_validation_and_round_trip(tmp_path):
    p = scos.init_params("slpe", "classification", 16, 9, 8, 4, seed=3)
    assert not np.all(p.weights["E_b"] == p.weights["E_b"][0])
    p.save(tmp_path / "p.json")
    back = scos.SupernetParams.load(tmp_path / "p.json")
    assert back.to_json() == p.to_json()
    for k in p.weights:
        assert np.array_equal(back.weights[k], p.weights[k])
    w = dict(p.weights)
    del w["E_b"]
    with pytest.raises(ValueError, match="E_b"):
        scos.SupernetParams("slpe", "classification", 16, w)
    w = {k: v.copy() for k, v in p.weights.items()}
    w["W1"][0, 0] = np.nan
    with pytest.raises(ValueError, match="non-finite"):
        scos.SupernetParams("slpe", "classification", 16, w)
    with pytest.raises(ValueError):
        scos.init_params("rope", "classification", 16, 9)


# ---------------------------------------------------------------- training


def test_zero_iterations_returns_init(cls_data):
    cfg = replace(FAST, iterations=0)
    p = scos.train_one_shot(cls_data, cfg)
    init = scos.init_params(cfg.pe_kind, "classification", 16, 9, cfg.hidden, 4, cfg.seed)
    assert p.to_json() == init.to_json()


def test_training_deterministic_and_data_untouched(cls_data):
    x_before = cls_data.x.copy()
    a = scos.train_one_shot(cls_data, FAST)
    b = scos.train_one_shot(cls_data, FAST)
    assert a.to_json() == b.to_json()
    assert np.array_equal(cls_data.x, x_before)
    assert a.steps == FAST.iterations


def test_loss_decreases_on_fixed_pair(cls_data):
    sub = cls_data.subset(np.arange(32))
    cfg = replace(FAST, iterations=100, batch_size=32, learning_rate=0.1)
    p0 = scos.init_params("slpe", "classification", 16, 9, cfg.hidden, 4, cfg.seed)
    before, _ = scos.loss_and_grad(p0, sub.x, sub.y, (2, 9, 13))
    p = scos.train_one_shot(sub, cfg, fixed_bc=(2, 9, 13))
    after, _ = scos.loss_and_grad(p, sub.x, sub.y, (2, 9, 13))
    assert after < before


def test_divergence_reports_step(rec_data):
    cfg = scos.ScosTrainConfig(iterations=200, learning_rate=1e6, pe_kind="slpe", clip_norm=None)
    with pytest.raises(scos.TrainingDiverged) as info:
        scos.train_one_shot(rec_data, cfg)
    assert 0 <= info.value.step < 200
    assert f"step {info.value.step}" in str(info.value)


def test_config_validation(cls_data):
    with pytest.raises(ValueError):
        scos.train_one_shot(cls_data, replace(FAST, k=16))
    with pytest.raises(ValueError):
        replace(FAST, batch_size=0).validate()
    with pytest.raises(ValueError):
        replace(FAST, val_frac=1.0).validate()


def test_training_log(cls_data, tmp_path):
    rows = []
    scos.train_one_shot(cls_data, replace(FAST, iterations=5), log=rows)
    scos.write_training_log(rows, tmp_path / "log.csv")
    with open(tmp_path / "log.csv") as fh:
        lines = list(csv.reader(fh))
    assert lines[0] == ["step", "loss", "bands"] and len(lines) == 6
    assert lines[1][0] == "0" and lines[1][2].count("-") == 2


# ---------------------------------------------------------------- evaluation and search


@pytest.fixture(scope="module")
def trained(cls_data):
    train, val = scos.split_data(cls_data, 0.5, 0)
    return scos.train_one_shot(train, replace(FAST, iterations=1500)), val


def test_evaluate_bc(trained):
    params, val = trained
    a = scos.evaluate_bc(params, val, (2, 9, 13))
    assert a == scos.evaluate_bc(params, val, (2, 9, 13))
    assert 0.0 <= a <= 1.0
    ev = scos.SupernetEvaluator(params, val)
    assert ev((2, 9, 13))["OA"] == a
    with pytest.raises(ValueError):
        scos.evaluate_bc(params, val.subset(np.arange(0)), (2, 9, 13))


def test_scos_search_edge_cases(trained):
    params, val = trained
    space = SearchSpace(16, 3)
    scores = scos.supernet_scores(params, val, space)
    full = scos.scos_search(params, val, space, 560)
    best = max(scores.values())
    assert full.score == best
    assert full.bands == min(bc for bc, v in scores.items() if v == best)
    one = scos.scos_search(params, val, space, 1, seed=4)
    assert one.bands == space.sample(1, np.random.default_rng(4))[0]
    with pytest.raises(ValueError):
        scos.scos_search(params, val, space, 0)


def test_finetune(cls_data):
    train, _ = scos.split_data(cls_data, 0.5, 0)
    cfg = replace(FAST, iterations=50)
    base = scos.train_one_shot(train, cfg)
    fresh = scos.finetune(base, train, (2, 9, 13), cfg)
    warm = scos.finetune(base, train, (2, 9, 13), cfg, warm_start=True)
    assert fresh.steps == 50 and warm.steps == 100
    assert base.steps == 50


def test_scos_search_beats_random_percentile(cls_data, cls_table):
    """Found bc regret is no worse than the 90th percentile of random-bc regret."""
    values = cls_table.values("OA")
    regrets = np.array([regret(cls_table, bc) for bc in values])
    p90 = np.percentile(regrets, 90)
    hits = 0
    for seed in range(3):
        cfg = replace(scos.ScosTrainConfig(), seed=seed, iterations=2000)
        train, val = scos.split_data(cls_data, cfg.val_frac, seed)
        params = scos.train_one_shot(train, cfg)
        found = scos.scos_search(params, val, all_combinations(16, 3), 200, seed=seed)
        hits += regret(cls_table, found.bands) <= p90
    assert hits == 3
