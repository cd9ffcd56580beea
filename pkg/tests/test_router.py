import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qmoe.errors import ParameterError, ShapeError
from qmoe.experts import ExpertNet, TrainConfig
from qmoe.quantizers import QuantScheme
from qmoe.router import (MoEModel, RouterNet, curiosity_adjust, estimate_uncertainty, importance,
                         load_balance_loss, mc_router_samples, route_batch_curious,
                         route_batch_uniform, route_curious, route_uniform, train_moe)
from qmoe.tensor_core import Rng, entropy, softmax_temp as softmax


def small_moe(n=3, k=1, seed=0, classes=4, **kw):
    return MoEModel.build(classes, [QuantScheme.float32()] * n, hidden=(16,), seed=seed, k=k, **kw)


def force_router(model, logits):
    head = model.router.layers[-1]
    head.weight[:] = 0
    head.bias[:] = logits
    model.router.invalidate()


def test_router_shape():
    r = RouterNet.create(5)
    assert [s[:2] for s in r.layer_specs] == [(1024, 128), (128, 64), (64, 5)]
    assert r.dropout_p == 0.2 and r.dropout_after == (0,)


def test_model_invariants():
    with pytest.raises(ParameterError):
        small_moe(n=2, k=3)
    with pytest.raises(ParameterError):
        small_moe(T=0.0)
    experts = [ExpertNet.build(3, hidden=(8,)), ExpertNet.build(3, hidden=(8,))]
    with pytest.raises(ShapeError):
        MoEModel(experts, RouterNet.create(3))


def test_identical_experts_full_selection(nprng):
    e = ExpertNet.build(4, hidden=(16,), seed=1)
    m = MoEModel([e, e.copy()], RouterNet.create(2, seed=2), k=2)
    for _ in range(10):
        z = nprng.standard_normal(1024)
        y, d = route_uniform(m, z)
        assert np.allclose(y, e.forward(z), atol=1e-5)
        assert abs(d.weights.sum() - 1.0) < 1e-12


def test_forced_logits_pick_expert_zero(nprng):
    m = small_moe(n=4)
    force_router(m, [10, 0, 0, 0])
    z = nprng.standard_normal(1024)
    y, d = route_uniform(m, z)
    p0 = d.base_probs[0]
    assert p0 > 0.999 and d.selected.tolist() == [0]
    assert np.allclose(y, p0 * m.experts[0].forward(z), atol=1e-6)


def test_uniform_matches_hand_sum(nprng):
    m = small_moe(n=3, k=2, seed=5)
    for _ in range(50):
        z = nprng.standard_normal(1024)
        y, d = route_uniform(m, z)
        ref = sum(d.base_probs[i] * m.experts[i].forward(z).astype(np.float64) for i in d.selected)
        assert np.abs(y - ref).max() < 1e-6
        # weights are the raw probabilities, never renormalised
        assert d.weights.tolist() == d.base_probs[d.selected].tolist()
        assert d.weights.sum() < 1.0


def test_ties_go_to_lower_index(nprng):
    m = small_moe(n=4, k=2)
    force_router(m, [0, 1, 1, 1])
    _, d = route_uniform(m, nprng.standard_normal(1024))
    assert d.selected.tolist() == [1, 2]


def test_uniform_decision_zeroes_curiosity_fields(nprng):
    _, d = route_uniform(small_moe(), nprng.standard_normal(1024))
    assert d.curious_probs is None and not d.kl_per_expert.any() and d.mc_samples == 0


def test_uncertainty_no_dropout_and_symmetry(nprng):
    m = small_moe(n=3)
    m.router.dropout_p = 0.0
    z = nprng.standard_normal(1024)
    p_bar, H, per = estimate_uncertainty(m, z, Rng(0))
    assert (per == per[0]).all()
    assert abs(H - entropy(softmax(m.router.forward(z)))) < 1e-12
    for l in m.router.layers:
        l.weight[:] = 0
        l.bias[:] = 0
    m.router.dropout_p = 0.2
    m.router.invalidate()
    p_bar, H, _ = estimate_uncertainty(m, z, Rng(0))
    assert np.allclose(p_bar, 1 / 3) and abs(H - math.log(3)) < 1e-6


def test_uncertainty_resum_and_errors(nprng):
    m = small_moe(n=3)
    z = nprng.standard_normal(1024)
    p_bar, _, per = estimate_uncertainty(m, z, Rng(3))
    acc = np.zeros(3)
    for row in per:
        for i, v in enumerate(row):
            acc[i] += v
    assert np.abs(acc / len(per) - p_bar).max() < 1e-9
    with pytest.raises(ParameterError):
        mc_router_samples(m, z, Rng(0), samples=1)
    a = estimate_uncertainty(m, z, Rng(3))[2]
    assert a.tobytes() == per.tobytes()


def test_curiosity_closed_form():
    p = curiosity_adjust([0.5, 0.5], [math.log(2), 0.0], 1.0)
    assert np.abs(p - [2 / 3, 1 / 3]).max() < 1e-9
    base = np.array([0.2, 0.3, 0.5])
    assert curiosity_adjust(base, [0.4, 0.1, 0.0], 0.0).tobytes() == base.tobytes()
    assert curiosity_adjust(base, np.zeros(3), 5.0).tobytes() == base.tobytes()
    with pytest.raises(ParameterError):
        curiosity_adjust(base, np.zeros(3), -1.0)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=2, max_size=6), st.floats(0, 10),
       st.integers(0, 2**32 - 1))
def test_curious_probs_valid(logits, alpha, seed):
    p = softmax(np.array(logits))
    kl = np.random.default_rng(seed).exponential(2.0, len(logits))
    q = curiosity_adjust(p, kl, alpha)
    assert np.all(q >= 0) and abs(q.sum() - 1) < 1e-9


def test_monotone_bonus():
    p = np.array([0.3, 0.3, 0.4])
    prev = 1.0
    for kl0 in [0.1, 0.2, 0.5, 1.0]:
        q = curiosity_adjust(p, [kl0, 0.0, 0.0], 1.0)
        ratio = q[0] / q[1]
        assert ratio > prev
        prev = ratio


def test_alpha_zero_reproduces_uniform(nprng):
    m = small_moe(n=3, k=2, alpha_curiosity=0.0)
    Z = nprng.standard_normal((100, 1024)).astype(np.float32)
    yu, bu = route_batch_uniform(m, Z)
    yc, bc = route_batch_curious(m, Z, Rng(1))
    assert yu.tobytes() == yc.tobytes()
    assert bu.selected.tobytes() == bc.selected.tobytes()
    assert bc.active_probs.tobytes() == bc.base_probs.tobytes()


def test_consensus_gives_zero_bonus(nprng):
    e = ExpertNet.build(4, hidden=(16,), seed=1)
    m = MoEModel([e, e.copy(), e.copy()], RouterNet.create(3, seed=2), k=1, alpha_curiosity=3.0)
    _, d = route_curious(m, nprng.standard_normal(1024), Rng(0))
    assert not d.kl_per_expert.any()
    assert d.curious_probs.tobytes() == d.base_probs.tobytes()


def test_curious_decision_populated_and_deterministic(nprng):
    m = small_moe(n=3, k=2, alpha_curiosity=2.0)
    z = nprng.standard_normal(1024)
    _, a = route_curious(m, z, Rng(8))
    _, b = route_curious(m, z, Rng(8))
    assert a.to_json() == b.to_json()
    assert a.mc_samples == 10 and a.expert_class_dists.shape == (3, 4)
    assert abs(a.curious_probs.sum() - 1) < 1e-12 and a.predictive_entropy >= 0
    assert np.allclose(a.mean_dist, a.expert_class_dists.mean(axis=0))


def test_gate_kl_mode(nprng):
    m = small_moe(n=3, alpha_curiosity=1.0, kl_mode="gate")
    _, d = route_curious(m, nprng.standard_normal(1024), Rng(0))
    assert np.all(d.kl_per_expert >= 0) and abs(d.curious_probs.sum() - 1) < 1e-12


def test_temperature_keeps_topk(nprng):
    m = small_moe(n=5, k=2)
    Z = nprng.standard_normal((30, 1024)).astype(np.float32)
    base = route_batch_uniform(m, Z)[1].selected
    for T in (0.1, 0.5, 2.0, 10.0):
        m.T = T
        assert np.array_equal(route_batch_uniform(m, Z)[1].selected, base)


def test_load_balance_examples(nprng):
    assert load_balance_loss(np.full((5, 4), 0.25)) == 0.0
    assert load_balance_loss(np.array([[1.0, 0.0]] * 3)) == 1.0
    for _ in range(100):
        P = nprng.dirichlet(np.ones(4), 8)
        perm = nprng.permutation(4)
        assert abs(load_balance_loss(P) - load_balance_loss(P[:, perm])) < 1e-12
    _, d = route_uniform(small_moe(), nprng.standard_normal(1024))
    assert load_balance_loss([d]) >= 0
    with pytest.raises(ParameterError):
        load_balance_loss([])


def _train(table, seed, **kw):
    X, y = table.data, table.labels
    m = MoEModel.build(2, [QuantScheme.float32()] * 2, hidden=(32,), seed=seed, k=1, **kw)
    res = train_moe(m, (X[::2], y[::2]), (X[1::2], y[1::2]),
                    TrainConfig.moe(max_epochs=40, seed=seed))
    return m, res


def test_specialisation(two_cluster):
    m, res = _train(two_cluster, 0)
    _, b = route_batch_uniform(m, two_cluster.data)
    sel, y = b.selected[:, 0], two_cluster.labels
    for c in (0, 1):
        assert np.bincount(sel[y == c], minlength=2).max() / np.sum(y == c) >= 0.8
    assert res.best_val_f1 == 1.0


def test_strong_balance_pressure(two_cluster):
    m, _ = _train(two_cluster, 1, alpha_balance=10.0)
    _, b = route_batch_uniform(m, two_cluster.data)
    assert np.abs(importance(b.base_probs) - 0.5).max() < 0.1
