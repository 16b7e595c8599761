import itertools

import numpy as np
import pytest

from blendfl import nn_core
from blendfl.client import Client, ModelBundle, build_bundle
from blendfl.config import ModelConfig, SyntheticSpec
from blendfl.data import ClientDataset, MultimodalSample, generate_synthetic, holdout_split, partition
from blendfl.messages import FeatureBatch
from blendfl.nn_core import LayerSpec, Network
from blendfl.server import (AggregationError, AggregationServer, AlignmentError, EvaluationError, Submission,
                            ValidationSet, blend_avg, evaluate_on_validation, fed_avg,
                            server_aggregate_and_train_vertical)

from oracles import brute_blend, pairwise_auroc


# -- BlendAvg ------------------------------------------------------------------

def test_blend_weights_follow_improvement():
    a, b = np.ones(3), np.full(3, 5.0)
    vec, info = blend_avg([("a", a, 0.6), ("b", b, 0.8)], 0.5)
    assert info.kept == pytest.approx({"a": 0.25, "b": 0.75}, abs=1e-12)
    np.testing.assert_allclose(vec, 0.25 * a + 0.75 * b, atol=1e-12)


def test_non_improving_models_are_discarded():
    vec, info = blend_avg([("a", np.zeros(2), 0.5), ("b", np.ones(2), 0.4), ("c", np.full(2, 2.0), 0.7)], 0.5)
    assert info.discarded == ["a", "b"]
    np.testing.assert_array_equal(vec, np.full(2, 2.0))


def test_all_discarded_keeps_previous():
    prev = np.array([1.0, 2.0])
    vec, info = blend_avg([("a", np.zeros(2), 0.3)], 0.5, previous=prev)
    np.testing.assert_array_equal(vec, prev)
    assert info.kept == {} and info.discarded == ["a"]
    with pytest.raises(AggregationError):
        blend_avg([("a", np.zeros(2), 0.3)], 0.5)


def test_blend_layout_mismatch():
    with pytest.raises(AggregationError):
        blend_avg([("a", np.zeros(2), 0.9), ("b", np.zeros(3), 0.9)], 0.5)


@pytest.mark.parametrize("seed", range(5))
def test_blend_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    for _ in range(20):
        k, d = int(rng.integers(1, 7)), int(rng.integers(1, 30))
        subs = [(f"c{i}", rng.normal(size=d), float(rng.random())) for i in range(k)]
        a_global = float(rng.random())
        prev = rng.normal(size=d)
        vec, info = blend_avg(subs, a_global, prev)
        ref, weights, discarded = brute_blend(subs, a_global)
        assert info.discarded == discarded
        if ref is None:
            np.testing.assert_array_equal(vec, prev)
        else:
            assert np.max(np.abs(vec - ref)) < 1e-12
            assert abs(sum(info.kept.values()) - 1) < 1e-12


def test_blend_and_fedavg_permutation_invariant():
    rng = np.random.default_rng(1)
    subs = [(f"c{i}", rng.normal(size=10), float(rng.random())) for i in range(4)]
    counts = [(t, p, int(rng.integers(1, 50))) for t, p, _ in subs]
    ref_b, _ = blend_avg(subs, 0.2)
    ref_f = fed_avg(counts)
    for perm in itertools.permutations(range(4)):
        b, _ = blend_avg([subs[i] for i in perm], 0.2)
        assert np.max(np.abs(b - ref_b)) < 1e-12
        assert np.max(np.abs(fed_avg([counts[i] for i in perm]) - ref_f)) < 1e-12


def test_fed_avg_weights_by_count():
    vec = fed_avg([("a", np.zeros(2), 1), ("b", np.full(2, 4.0), 3)])
    np.testing.assert_allclose(vec, [3.0, 3.0])
    with pytest.raises(AggregationError):
        fed_avg([("a", np.zeros(2), 0)])


# -- vertical path -------------------------------------------------------------

def _random_vertical_setup(seed):
    rng = np.random.default_rng(seed)
    n_clients = int(rng.integers(2, 4))
    n = int(rng.integers(4, 20))
    d, h, k = 3, 4, 3
    fa = Network.init([LayerSpec(d, h, "relu"), LayerSpec(h, 2, "relu")], rng)
    fb = Network.init([LayerSpec(d, h, "relu"), LayerSpec(h, 2, "relu")], rng)
    gv = Network.init([LayerSpec(4, k, "softmax")], rng)
    data = [ClientDataset(c) for c in range(n_clients)]
    owners = []
    for i in range(n):
        ca, cb = (int(x) for x in rng.choice(n_clients, size=2, replace=False))
        s = MultimodalSample(i, int(rng.integers(k)), rng.normal(size=d), rng.normal(size=d))
        data[ca].fragmented_a.append(s.only("A"))
        data[cb].fragmented_b.append(s.only("B"))
        owners.append((s, ca, cb))
    bundle = ModelBundle(f_a=fa, f_b=fb)
    clients = [Client(dd, bundle, np.random.default_rng(0)) for dd in data]
    alignment = {s.id: (ca, cb) for s, ca, cb in owners}
    return fa, fb, gv, clients, alignment, owners


@pytest.mark.parametrize("seed", range(10))
def test_split_gradients_equal_monolithic(seed):
    fa, fb, gv, clients, alignment, owners = _random_vertical_setup(seed)
    batches = [c.forward_fragmented(m, 0) for m in ("A", "B") for c in clients if c.fragmented_ids(m)]
    res = server_aggregate_and_train_vertical(gv, alignment, batches, lr=1.0)
    client_grads = {}
    for gb in res.gradients:
        client_grads[(gb.client_id, gb.modality)] = clients[gb.client_id].apply_server_gradients(
            gb.modality, gb.grad, 0, 0.0)

    # monolithic network over rows in alignment order
    mono = nn_core.chain(nn_core.parallel(fa, fb), gv)
    aligned = [sid for b in batches if b.modality == "A" for sid in b.ids]
    by_id = {s.id: (s, ca, cb) for s, ca, cb in owners}
    X = np.vstack([np.hstack([by_id[i][0].x_a, by_id[i][0].x_b]) for i in aligned])
    y = [by_id[i][0].label for i in aligned]
    out, trace = nn_core.forward(mono, X)
    _, dout = nn_core.loss_and_grad(out, y)
    full, _ = nn_core.backward(mono, trace, dout)
    n_enc = nn_core.parallel(fa, fb).n_params
    assert np.max(np.abs((gv.params - res.g_v.params) - full[n_enc:])) < 1e-12

    for (cid, m), g in client_grads.items():
        mask = np.array([(by_id[i][1] if m == "A" else by_id[i][2]) == cid for i in aligned], dtype=float)
        part, _ = nn_core.backward(mono, trace, dout * mask[:, None])
        ga, gb_ = nn_core.split_parallel_grad(fa, fb, part[:n_enc])
        assert np.max(np.abs(g - (ga if m == "A" else gb_))) < 1e-12


def test_vertical_without_batches_is_noop():
    gv = Network.init([LayerSpec(4, 2, "softmax")], np.random.default_rng(0))
    res = server_aggregate_and_train_vertical(gv, {}, [], 0.1)
    assert res.g_v is gv and res.loss is None and res.gradients == []


def test_unpartnered_rows_get_zero_gradient():
    gv = Network.init([LayerSpec(4, 2, "softmax")], np.random.default_rng(0))
    fb = FeatureBatch(0, "A", 0, (1,), np.ones((1, 2)), np.array([0]))
    res = server_aggregate_and_train_vertical(gv, {1: (0, 1)}, [fb], 0.1)
    assert res.warning and res.n_aligned == 0
    np.testing.assert_array_equal(res.gradients[0].grad, 0.0)


def test_wrong_owner_rejected():
    gv = Network.init([LayerSpec(4, 2, "softmax")], np.random.default_rng(0))
    fb = FeatureBatch(2, "A", 0, (1,), np.ones((1, 2)), np.array([0]))
    with pytest.raises(AlignmentError):
        server_aggregate_and_train_vertical(gv, {1: (0, 1)}, [fb], 0.1)


# -- evaluation ----------------------------------------------------------------

def test_evaluation_perfect_constant_and_errors():
    y = np.array([0, 1, 2, 0, 1, 2])
    assert evaluate_on_validation(np.eye(3)[y], y) == 1.0
    assert evaluate_on_validation(np.full((6, 3), 1 / 3), y) == 0.5
    with pytest.raises(EvaluationError):
        evaluate_on_validation(np.zeros((0, 3)), [])
    with pytest.raises(EvaluationError):
        evaluate_on_validation(np.full((2, 3), 1 / 3), [1, 1])


def test_random_scores_near_chance():
    rng = np.random.default_rng(0)
    y = rng.integers(0, 4, size=4000)
    assert abs(evaluate_on_validation(rng.random((4000, 4)), y) - 0.5) < 0.03


# -- aggregation round ---------------------------------------------------------

def _macro_oracle(probs, y):
    return np.mean([pairwise_auroc(list(probs[:, c]), list((y == c).astype(int))) for c in range(probs.shape[1])])


def test_round_blend_matches_oracle_on_unimodal_stacks():
    samples = generate_synthetic(SyntheticSpec(n_samples=300, noise_std=1.5, seed=2))
    train, val, _ = holdout_split(samples, 0.2, 0.2, seed=0)
    data = partition(train, 3, 0.0, 0.0, seed=0)
    init = build_bundle(ModelConfig(), 8, 8, 4, np.random.default_rng(0))
    clients = [Client(d, init, np.random.default_rng(d.client_id)) for d in data]
    for c in clients:
        c.train_local_partial("A", 0.1, 16)
    subs = [Submission(c.client_id, c.bundle, ("A",), {"A": c.n_records("A")}) for c in clients]
    vs = ValidationSet(val)
    server = AggregationServer(init, vs)
    new, report = server.aggregate_round(subs)

    a_global = _macro_oracle(init.predict("A", vs.XA), vs.y)
    oracle_subs = [(f"client{c.client_id}", c.bundle.unimodal_vector("A"),
                    _macro_oracle(c.bundle.predict("A", vs.XA), vs.y)) for c in clients]
    ref, weights, discarded = brute_blend(oracle_subs, a_global)
    assert report["A"]["discarded"] == discarded
    assert np.max(np.abs(new.unimodal_vector("A") - ref)) < 1e-12
    assert report["B"] == {"skipped": True, "post_score": pytest.approx(vs.score(new, "B"))}


def test_single_improving_client_is_copied():
    samples = generate_synthetic(SyntheticSpec(n_samples=200, seed=1))
    train, val, _ = holdout_split(samples, 0.2, 0.2, seed=0)
    init = build_bundle(ModelConfig(), 8, 8, 4, np.random.default_rng(0))
    c = Client(ClientDataset(0, paired=train), init, np.random.default_rng(0))
    for _ in range(5):
        c.train_local_paired(0.1, 16)
    server = AggregationServer(init, ValidationSet(val))
    new, report = server.aggregate_round([Submission(0, c.bundle, ("M",), {"M": len(train)})])
    assert report["M"]["weights"] == {"client0": 1.0}
    np.testing.assert_array_equal(new.g_m.params, c.bundle.g_m.params)
