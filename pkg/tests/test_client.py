import numpy as np
import pytest

from blendfl import nn_core
from blendfl.client import CapabilityError, Client, ModelBundle, build_bundle, local_inference
from blendfl.config import ModelConfig, SyntheticSpec
from blendfl.data import ClientDataset, MultimodalSample, generate_synthetic, partition
from blendfl.messages import ProtocolError
from blendfl.nn_core import LayerSpec, Network

from oracles import central_diff, max_rel_error


def make_bundle(seed=0, dim=8, k=4):
    return build_bundle(ModelConfig(), dim, dim, k, np.random.default_rng(seed))


@pytest.fixture(scope="module")
def easy():
    return generate_synthetic(SyntheticSpec(n_samples=200, noise_std=0.3, seed=0))


def test_paired_only_client_skips_partial_phase(easy):
    c = Client(ClientDataset(0, paired=list(easy[:20])), make_bundle(), np.random.default_rng(0))
    before = c.bundle
    assert c.train_local_partial("A", 0.1, 8) is None
    assert c.bundle is before


def test_trim_keeps_only_held_modalities(easy):
    c = Client(ClientDataset(0, partial_a=[s.only("A") for s in easy[:10]]), make_bundle(), np.random.default_rng(0))
    assert c.bundle.f_a is not None and c.bundle.f_b is None and c.bundle.g_m is None
    c.load_globals(make_bundle(1))
    assert c.bundle.g_m is not None and c.bundle.f_b is None


def test_partial_training_converges(easy):
    data = ClientDataset(0, partial_a=[s.only("A") for s in easy])
    c = Client(data, make_bundle(), np.random.default_rng(0))
    losses = [c.train_local_partial("A", 0.1, 16) for _ in range(30)]
    assert losses[-1] < losses[0] / 4
    X = np.vstack([s.x_a for s in easy])
    y = np.array([s.label for s in easy])
    assert np.mean(c.bundle.predict("A", X).argmax(axis=1) == y) > 0.95


def test_fragmented_records_count_as_unimodal_only_when_enabled(easy):
    data = ClientDataset(0, fragmented_a=[s.only("A") for s in easy[:5]], partial_a=[s.only("A") for s in easy[5:8]])
    assert Client(data, make_bundle(), np.random.default_rng(0)).n_unimodal("A") == 8
    assert Client(data, make_bundle(), np.random.default_rng(0), fragmented_in_unimodal=False).n_unimodal("A") == 3


def test_paired_step_matches_finite_differences(easy):
    paired = list(easy[:12])
    bundle = make_bundle(3)
    c = Client(ClientDataset(0, paired=paired), bundle, np.random.default_rng(0))
    XA = np.vstack([s.x_a for s in paired])
    XB = np.vstack([s.x_b for s in paired])
    y = np.array([s.label for s in paired])
    sizes = [bundle.f_a.n_params, bundle.f_b.n_params]

    def loss(p):
        fa = bundle.f_a.with_params(p[:sizes[0]])
        fb = bundle.f_b.with_params(p[sizes[0]:sum(sizes)])
        gm = bundle.g_m.with_params(p[sum(sizes):])
        out = gm(np.hstack([fa(XA), fb(XB)]))
        return nn_core.loss_and_grad(out, y)[0]

    p0 = np.concatenate([bundle.f_a.params, bundle.f_b.params, bundle.g_m.params])
    lr = 0.05
    c.train_local_paired(lr, batch_size=len(paired))
    p1 = np.concatenate([c.bundle.f_a.params, c.bundle.f_b.params, c.bundle.g_m.params])
    numeric = central_diff(loss, p0)
    assert max_rel_error((p0 - p1) / lr, numeric) < 1e-4


def test_linear_encoder_update_is_closed_form():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(3, 4))
    samples = [MultimodalSample(i, i % 2, x_a=X[i]) for i in range(3)]
    enc = Network.init([LayerSpec(4, 2, "identity")], rng)
    c = Client(ClientDataset(0, fragmented_a=samples), ModelBundle(f_a=enc), np.random.default_rng(0))
    fb = c.forward_fragmented("A", "t")
    np.testing.assert_allclose(fb.features, X @ enc.weights(0)[0], atol=1e-15)
    G = rng.normal(size=(3, 2))
    c.apply_server_gradients("A", G, "t", lr=0.5)
    W, b = c.bundle.f_a.weights(0)
    np.testing.assert_allclose(W, enc.weights(0)[0] - 0.5 * X.T @ G, atol=1e-14)
    np.testing.assert_allclose(b, -0.5 * G.sum(axis=0), atol=1e-14)


def test_features_follow_requested_ids(easy):
    clients = partition(easy, 2, 0.0, 1.0, seed=0)
    c = Client(clients[0], make_bundle(), np.random.default_rng(0))
    ids = c.fragmented_ids("A")[:5][::-1]
    fb = c.forward_features("A", ids, 1)
    assert fb.ids == tuple(ids)
    assert fb.labels is not None and len(fb.labels) == 5
    by_id = {s.id: s for s in easy}
    np.testing.assert_allclose(fb.features, c.bundle.f_a(np.vstack([by_id[i].x_a for i in ids])))


def test_modality_b_features_carry_no_labels(easy):
    clients = partition(easy, 2, 0.0, 1.0, seed=0)
    c = next(Client(d, make_bundle(), np.random.default_rng(0)) for d in clients if d.fragmented_b)
    assert c.forward_fragmented("B", 0).labels is None


def test_trace_protocol_errors(easy):
    clients = partition(easy, 2, 0.0, 1.0, seed=0)
    c = Client(clients[0], make_bundle(), np.random.default_rng(0))
    with pytest.raises(ProtocolError):
        c.apply_server_gradients("A", np.zeros((1, 8)), 0, 0.1)
    fb = c.forward_fragmented("A", 0)
    with pytest.raises(ProtocolError):
        c.forward_fragmented("A", 0)
    with pytest.raises(ProtocolError):
        c.apply_server_gradients("A", np.zeros_like(fb.features), 1, 0.1)
    with pytest.raises(ProtocolError):
        c.apply_server_gradients("A", np.zeros((1, 8)), 0, 0.1)
    c.apply_server_gradients("A", np.zeros_like(fb.features), 0, 0.1)
    assert not c.pending_traces
    with pytest.raises(ProtocolError):
        c.forward_features("A", [10**6], 2)


def test_inference_dispatch_and_recompute(easy):
    bundle = make_bundle(4)
    s = easy[0]
    pred = local_inference(bundle, s)
    assert pred.head == "multimodal"
    np.testing.assert_allclose(pred.probs, bundle.g_m(np.hstack([bundle.f_a(s.x_a[None]), bundle.f_b(s.x_b[None])]))[0])
    assert pred.label == int(np.argmax(pred.probs))
    a = local_inference(bundle, s.only("A"))
    assert a.head == "unimodal_A"
    np.testing.assert_allclose(a.probs, bundle.g_a(bundle.f_a(s.x_a[None]))[0])
    assert local_inference(bundle, s.only("B")).head == "unimodal_B"


def test_inference_falls_back_without_multimodal_head(easy):
    bundle = ModelBundle(f_a=make_bundle().f_a, g_a=make_bundle().g_a)
    assert local_inference(bundle, easy[0]).head == "unimodal_A"
    with pytest.raises(CapabilityError):
        local_inference(bundle, easy[0].only("B"))
