import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hetmp import autodiff as ad
from hetmp.flow import (
    HIST_EDGES,
    CouplingLayer,
    FlowConfig,
    FlowError,
    MaskError,
    MaskSpec,
    acl_forward,
    acl_inverse,
    adjacency_from_bonds,
    batch_tensors,
    conv_coupling,
    decode,
    discretize_bonds,
    encode,
    flow_forward,
    flow_inverse,
    flow_nll,
    gaussian_nll,
    generate,
    graph_node_homophily,
    graph_to_tensors,
    homophily_of_generated,
    init_conv_coupling,
    init_flow,
    load_model,
    mask_coverage,
    model_from_json_dict,
    model_to_json_dict,
    save_model,
    tensors_to_graph,
    toy_graph_pool,
    train_flow,
)
from hetmp.graph import Graph, symmetric_closure
from oracles import numeric_jacobian

TINY = FlowConfig(num_nodes=5, num_node_types=3, num_edge_types=2, layers_atom=4, layers_bond=2,
                  gnn_hidden=6, mlp_hidden=6, conv_hidden=4)


def mlp_coupling(rng, size, hidden=5, scale=0.5):
    """Random two-layer perceptron on the flattened frozen part."""
    w1 = scale * rng.standard_normal((size, hidden))
    b1 = scale * rng.standard_normal(hidden)
    w2 = scale * rng.standard_normal((hidden, 2 * size))
    b2 = scale * rng.standard_normal(2 * size)

    def fn(x2):
        shape = x2.shape
        flat = ad.reshape(x2, (shape[0], -1))
        out = ad.tanh(flat @ w1 + b1) @ w2 + b2
        return ad.reshape(ad.tanh(out[:, :size]), shape), ad.reshape(out[:, size:], shape)

    return fn


def zero_coupling(x2):
    z = ad.hadamard_mask(x2, np.zeros(x2.shape))
    return z, z


def random_mask(rng, shape):
    while True:
        m = (rng.random(shape) < 0.5).astype(float)
        if 0 < m.sum() < m.size:
            return MaskSpec(m)


# -- masks -------------------------------------------------------------------


def test_all_ones_mask_rejected():
    with pytest.raises(MaskError):
        MaskSpec(np.ones((3, 3)))
    with pytest.raises(MaskError):
        MaskSpec(np.full((2, 2), 0.5))


def test_striped_mask_rows_and_coverage():
    masks = [MaskSpec.striped(i, 9, 4) for i in range(9)]
    assert masks[2].mask[:, 0].tolist() == [0, 0, 1, 0, 0, 0, 0, 0, 0]
    assert mask_coverage(masks).all()
    short = [MaskSpec.striped(i, 9, 4, period=8) for i in range(8)]
    assert mask_coverage(short).all()


def test_model_masks_cover_every_entry():
    for cfg in (FlowConfig(), TINY, FlowConfig(num_nodes=9, layers_atom=3)):
        model = init_flow(cfg)
        assert mask_coverage(model.atom_masks()).all()
        assert mask_coverage(model.bond_masks()).all()


def test_checkerboard_alternates():
    a, b = MaskSpec.checkerboard(0, 2, 3), MaskSpec.checkerboard(1, 2, 3)
    assert np.array_equal(a.mask + b.mask, np.ones((2, 3, 3)))
    assert a.mask[0, 0, 0] == 1 and a.mask[0, 0, 1] == 0


# -- single coupling layers --------------------------------------------------


def test_identity_coupling():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((3, 4, 2))
    layer = CouplingLayer(MaskSpec.striped(0, 4, 2), zero_coupling)
    y, ld = acl_forward(x, layer)
    assert np.array_equal(y.data, x)
    assert np.array_equal(ld.data, np.zeros(3))
    assert np.array_equal(acl_inverse(x, layer).data, x)


def test_forward_leaves_frozen_part():
    rng = np.random.default_rng(1)
    m = MaskSpec.striped(1, 4, 3)
    x = rng.standard_normal((2, 4, 3))
    y, _ = acl_forward(x, CouplingLayer(m, mlp_coupling(rng, 12)))
    frozen = m.mask == 0
    assert np.array_equal(y.data[:, frozen], x[:, frozen])


def test_shape_mismatch():
    layer = CouplingLayer(MaskSpec.striped(0, 4, 2), zero_coupling)
    with pytest.raises(ad.ShapeError):
        acl_forward(np.zeros((1, 3, 2)), layer)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([(2, 2), (3, 3), (4, 3), (2, 3, 3)]))
def test_single_layer_round_trip(seed, shape):
    rng = np.random.default_rng(seed)
    size = int(np.prod(shape))
    layer = CouplingLayer(random_mask(rng, shape), mlp_coupling(rng, size))
    x = rng.standard_normal((16,) + shape) * 3
    y, _ = acl_forward(x, layer)
    assert np.max(np.abs(acl_inverse(y.data, layer).data - x)) < 1e-12


@pytest.mark.parametrize("shape", [(2, 2), (3, 3)])
def test_logdet_matches_jacobian(shape):
    rng = np.random.default_rng(sum(shape))
    size = int(np.prod(shape))
    for _ in range(20):
        layer = CouplingLayer(random_mask(rng, shape), mlp_coupling(rng, size, scale=1.0))
        x = rng.standard_normal(shape)
        _, ld = acl_forward(x[None], layer)
        J = numeric_jacobian(lambda z: acl_forward(z[None], layer)[0].data[0], x)
        _, ref = np.linalg.slogdet(J)
        assert abs(ld.data[0] - ref) / max(abs(ref), 1e-8) < 1e-6 or abs(ld.data[0] - ref) < 1e-9


def test_conv_coupling_logdet_and_inverse():
    rng = np.random.default_rng(3)
    params = init_conv_coupling(rng, 2, 3, "c.", identity=False)
    layer = CouplingLayer(MaskSpec.checkerboard(0, 2, 3), conv_coupling(params, "c."))
    x = rng.standard_normal((2, 3, 3))
    y, ld = acl_forward(x[None], layer)
    J = numeric_jacobian(lambda z: acl_forward(z[None], layer)[0].data[0], x)
    assert ld.data[0] == pytest.approx(np.linalg.slogdet(J)[1], rel=1e-6)
    np.testing.assert_allclose(acl_inverse(y.data, layer).data[0], x, atol=1e-12)


def test_stacked_logdet_adds():
    rng = np.random.default_rng(4)
    layers = [CouplingLayer(MaskSpec.striped(i, 3, 2), mlp_coupling(rng, 6)) for i in range(3)]
    x = rng.standard_normal((1, 3, 2))
    _, total = flow_forward(x, layers)
    J = numeric_jacobian(lambda z: flow_forward(z[None], layers)[0].data[0], x[0])
    assert total.data[0] == pytest.approx(np.linalg.slogdet(J)[1], rel=1e-6)


# -- full model --------------------------------------------------------------


def test_untrained_identity_flow():
    model = init_flow(TINY, seed=0, identity=True)
    graphs = toy_graph_pool(4, 5, 3, 2, seed=1)
    X, B = batch_tensors(graphs, TINY)
    ha, hb = encode(model, graphs)
    assert np.array_equal(ha, X) and np.array_equal(hb, B)


def test_nll_identity_flow_is_gaussian_nll_of_input():
    cfg = FlowConfig(**{**TINY.__dict__, "variance_mode": 0})
    model = init_flow(cfg, identity=True)
    graphs = toy_graph_pool(3, 5, 3, 2, seed=2)
    X, B = batch_tensors(graphs, cfg)
    L_a, L_b = flow_nll(model, graphs)
    ref_a = 0.5 * (X**2).sum(axis=(1, 2)) + 0.5 * X[0].size * math.log(2 * math.pi)
    ref_b = 0.5 * (B**2).sum(axis=(1, 2, 3)) + 0.5 * B[0].size * math.log(2 * math.pi)
    np.testing.assert_allclose(L_a.data, ref_a, rtol=1e-14)
    np.testing.assert_allclose(L_b.data, ref_b, rtol=1e-14)


def test_gaussian_nll_variance_closed_form():
    tape = ad.Tape()
    h = tape.constant(np.zeros((1, 4, 3)))
    base = gaussian_nll(h, 0.0).data[0]
    doubled = gaussian_nll(h, math.log(2.0)).data[0]
    assert doubled - base == pytest.approx(0.5 * 12 * math.log(2.0), abs=1e-12)
    as_param = gaussian_nll(h, tape.param("m", np.array(math.log(2.0)))).data[0]
    assert as_param == pytest.approx(doubled, abs=1e-12)


@pytest.mark.parametrize("mode,keys", [(0, set()), (1, {"ln_mu"}), (2, {"ln_mu_a", "ln_mu_b"})])
def test_variance_modes(mode, keys):
    model = init_flow(FlowConfig(**{**TINY.__dict__, "variance_mode": mode}))
    assert {k for k in model.params if k.startswith("ln_mu")} == keys
    with pytest.raises(ValueError):
        FlowConfig(variance_mode=3)


def test_random_flow_round_trip():
    model = init_flow(TINY, seed=5, identity=False)
    graphs = toy_graph_pool(6, 5, 3, 2, seed=3)
    X, B = batch_tensors(graphs, TINY)
    rng = np.random.default_rng(0)
    Xq, Bq = X + 0.6 * rng.random(X.shape), B + 0.6 * rng.random(B.shape)
    adj = adjacency_from_bonds(B)
    hb, _ = flow_forward(Bq, model.bond_layers())
    ha, _ = flow_forward(Xq, model.atom_layers(adj))
    assert not np.allclose(ha.data, Xq)
    assert np.max(np.abs(flow_inverse(hb.data, model.bond_layers()).data - Bq)) < 1e-9
    assert np.max(np.abs(flow_inverse(ha.data, model.atom_layers(adj)).data - Xq)) < 1e-9


def test_tensor_round_trip():
    for g in toy_graph_pool(10, 5, 3, 2, seed=4):
        X, B = graph_to_tensors(g, TINY)
        assert np.array_equal(B.sum(axis=0), np.ones((5, 5)))
        h = tensors_to_graph(X.argmax(axis=1), discretize_bonds(B), TINY)
        assert np.array_equal(h.edges, g.edges)
        assert np.array_equal(h.edge_types, g.edge_types)
        assert np.array_equal(h.labels, g.labels)


def test_graph_to_tensors_rejects_bad_graphs():
    g = toy_graph_pool(1, 6, 3, 2, seed=0)[0]
    with pytest.raises(ValueError):
        graph_to_tensors(g, TINY)


def test_training_reduces_nll_and_reconstructs():
    pool = toy_graph_pool(40, 5, 3, 2, seed=6)
    model = init_flow(TINY, seed=1)
    res = train_flow(model, pool, steps=40, batch_size=16, lr=5e-3, seed=0)
    assert len(res.nll_history) == 40 and model.steps_trained == 40
    assert np.mean(res.nll_history[-10:]) < np.mean(res.nll_history[:10])
    ha, hb = encode(model, pool[:10])
    for a, b in zip(decode(model, ha, hb), pool[:10]):
        assert np.array_equal(a.edges, b.edges) and np.array_equal(a.labels, b.labels)
        assert np.array_equal(a.edge_types, b.edge_types)


def test_train_flow_deterministic():
    pool = toy_graph_pool(10, 5, 3, 2, seed=7)
    a = train_flow(init_flow(TINY, seed=2), pool, steps=3, batch_size=4, seed=1)
    b = train_flow(init_flow(TINY, seed=2), pool, steps=3, batch_size=4, seed=1)
    assert a.nll_history == b.nll_history
    for k in a.model.params:
        assert np.array_equal(a.model.params[k], b.model.params[k])


# -- generation --------------------------------------------------------------


@pytest.fixture(scope="module")
def trained():
    pool = toy_graph_pool(20, 5, 3, 2, seed=8)
    model = init_flow(TINY, seed=3)
    train_flow(model, pool, steps=5, batch_size=8, seed=0)
    return model, pool


def test_generate_zero(trained):
    assert generate(trained[0], 0) == []


def test_generate_errors(trained):
    with pytest.raises(FlowError):
        generate(init_flow(TINY), 2)
    with pytest.raises(ValueError):
        generate(trained[0], 2, mode="true_adj", data_pool=[])
    with pytest.raises(ValueError):
        generate(trained[0], 2, mode="sideways")


def test_generate_true_adj_single_pool(trained):
    model, pool = trained
    out = generate(model, 7, mode="true_adj", data_pool=pool[:1], seed=1)
    assert len(out) == 7
    for g in out:
        assert np.array_equal(g.edges, pool[0].edges)
        assert np.array_equal(g.edge_types, pool[0].edge_types)


def test_generate_full_is_valid_and_deterministic(trained):
    model = trained[0]
    a, b = generate(model, 5, seed=4), generate(model, 5, seed=4)
    for g, h in zip(a, b):
        assert g.num_nodes == 5
        assert np.array_equal(g.edges, h.edges) and np.array_equal(g.labels, h.labels)
        assert not np.any(g.src == g.dst)
        assert np.array_equal(symmetric_closure(g.edges), g.edges)


# -- homophily histogram -----------------------------------------------------


def test_histogram_edges_fixed():
    assert np.allclose(HIST_EDGES, np.linspace(0, 1, 11))


def test_histogram_all_same_type_last_bin():
    g = Graph(3, symmetric_closure([[0, 1], [1, 2]]), np.eye(2)[[0, 0, 0]], np.array([0, 0, 0]), 2)
    hist = homophily_of_generated([g, g])
    assert hist.counts.tolist() == [0] * 9 + [2]
    assert hist.mean == 1.0


def test_histogram_empty_input():
    hist = homophily_of_generated([])
    assert hist.counts.tolist() == [0] * 10
    assert hist.to_csv().splitlines()[0] == "bin_lo,bin_hi,count"
    assert len(hist.to_csv().splitlines()) == 11


def test_graph_node_homophily_skips_isolated():
    g = Graph(4, symmetric_closure([[0, 1], [1, 2]]), np.zeros((4, 1)), np.array([0, 0, 1, 1]), 2)
    assert graph_node_homophily(g) == pytest.approx((1 + 0.5 + 0) / 3)
    assert graph_node_homophily(Graph(2, np.zeros((0, 2)), np.zeros((2, 1)), np.array([0, 1]), 2)) is None


# -- persistence -------------------------------------------------------------


def test_model_save_load_round_trip(tmp_path, trained):
    model = trained[0]
    save_model(model, tmp_path / "m.json")
    back = load_model(tmp_path / "m.json")
    assert back.config == model.config and back.steps_trained == model.steps_trained
    for k in model.params:
        assert np.array_equal(back.params[k], model.params[k])
    for k in model.state:
        for s in model.state[k]:
            assert np.array_equal(back.state[k][s], model.state[k][s])
    a = generate(model, 3, seed=9)
    b = generate(back, 3, seed=9)
    assert all(np.array_equal(x.labels, y.labels) and np.array_equal(x.edges, y.edges) for x, y in zip(a, b))


def test_model_file_validation(trained):
    d = model_to_json_dict(trained[0])
    with pytest.raises(ValueError):
        model_from_json_dict({**d, "format": "other"})
    with pytest.raises(ValueError):
        model_from_json_dict({**d, "version": 99})
    broken = {**d, "params": {k: v for k, v in d["params"].items() if k != "ln_mu"}}
    with pytest.raises(ValueError):
        model_from_json_dict(broken)


@pytest.mark.slow
def test_true_adj_generation_keeps_homophily_of_homophilous_pool():
    pool = toy_graph_pool(200, p_in=0.5, p_out=0.0, seed=0)
    reference = homophily_of_generated(pool)
    assert reference.mean == 1.0
    model = init_flow(FlowConfig(), seed=0)
    train_flow(model, pool, steps=600, lr=5e-3, seed=0)
    hist = homophily_of_generated(generate(model, 200, "true_adj", pool, seed=1))
    assert hist.counts.sum() == 200
    assert hist.mean >= 0.8
