import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hetmp.graph import Graph, SyntheticSpec, planted_partition, symmetric_closure
from hetmp.homophily import (
    class_insensitive_edge_homophily,
    cosine_similarity,
    edge_homophily,
    homophily_report,
    node_homophily,
    scale_from_similarity,
    scaling_factor,
)
from oracles import (
    brute_class_insensitive,
    brute_cosine,
    brute_edge_homophily,
    brute_node_homophily,
)


def labeled(n, pairs, labels, directed=False):
    e = np.array(pairs, dtype=np.int64).reshape(-1, 2)
    if not directed:
        e = symmetric_closure(e)
    return Graph(n, e, np.zeros((n, 1)), np.array(labels), int(max(labels)) + 1, directed=directed)


def random_graph(rng, n=None, classes=None):
    n = n or int(rng.integers(4, 25))
    classes = classes or int(rng.integers(2, 5))
    m = int(rng.integers(1, 3 * n))
    pairs = rng.integers(0, n, size=(m, 2))
    pairs = pairs[pairs[:, 0] != pairs[:, 1]]
    if len(pairs) == 0:
        pairs = np.array([[0, 1]])
    y = rng.integers(0, classes, size=n)
    y[:classes] = np.arange(classes)
    return labeled(n, pairs, y)


# -- cosine and channel scales ------------------------------------------------


def test_cosine_examples():
    assert cosine_similarity([1, 2], [1, 2]) == pytest.approx(1.0, abs=1e-15)
    assert cosine_similarity([1, 0], [0, 1]) == 0.0
    assert cosine_similarity([1, 0], [-1, 0]) == -1.0


def test_cosine_zero_vector_and_mismatch():
    assert cosine_similarity([0, 0], [1, 2]) == 0.0
    assert cosine_similarity([1e-13, 0], [1, 0]) == 0.0
    with pytest.raises(ValueError):
        cosine_similarity([1, 2, 3], [1, 2])


def test_scaling_factor_examples():
    assert scaling_factor([0.3, 0.4], [0.3, 0.4], "het") == pytest.approx(0.0, abs=1e-15)
    assert scaling_factor([5, -1], [0.2, 9], "orig") == 1.0
    assert scaling_factor([1, 0], [0, 1], "hom") == 0.0
    with pytest.raises(ValueError):
        scaling_factor([1, 0], [0, 1], "mix")


def test_negative_similarity_not_clamped():
    assert scaling_factor([1, 0], [-1, 0], "hom") == -1.0
    assert scaling_factor([1, 0], [-1, 0], "het") == 2.0


vec = arrays(np.float64, 5, elements=st.floats(-1e3, 1e3, allow_nan=False))


@given(vec, vec, st.floats(1e-3, 1e3))
def test_cosine_symmetric_scale_invariant(a, b, c):
    # scale invariance holds away from the zero-norm threshold
    assume(min(np.linalg.norm(a), np.linalg.norm(b)) > 1e-6)
    s = cosine_similarity(a, b)
    assert s == cosine_similarity(b, a)
    assert -1.0 <= s <= 1.0
    assert cosine_similarity(c * a, b) == pytest.approx(s, abs=1e-12)


@given(vec, vec)
def test_cosine_matches_brute(a, b):
    assert cosine_similarity(a, b) == pytest.approx(np.clip(brute_cosine(a, b), -1, 1), abs=1e-12)


@given(vec, vec)
def test_channel_scales_sum_to_one(a, b):
    sim = cosine_similarity(a, b)
    assert scale_from_similarity(sim, "orig") == 1.0
    assert scale_from_similarity(sim, "hom") + scale_from_similarity(sim, "het") == 1.0


# -- graph metrics ------------------------------------------------------------


def test_node_homophily_examples():
    assert node_homophily(labeled(3, [[0, 1], [1, 2], [0, 2]], [0, 0, 0])) == 1.0
    assert node_homophily(labeled(3, [[0, 1], [1, 2]], [0, 1, 0])) == 0.0


def test_node_homophily_isolated_counts_zero():
    g = labeled(3, [[0, 1]], [0, 0, 1])
    assert node_homophily(g) == pytest.approx(2 / 3)


def test_edge_homophily_examples():
    assert edge_homophily(labeled(3, [[0, 1], [1, 2], [0, 2]], [0, 0, 1])) == pytest.approx(1 / 3)
    assert edge_homophily(labeled(4, [[0, 1], [2, 3], [1, 3]], [2, 2, 2, 2])) == 1.0


def test_edge_homophily_empty_raises():
    g = Graph(2, np.zeros((0, 2)), np.zeros((2, 1)), np.array([0, 1]), 2)
    with pytest.raises(ValueError):
        edge_homophily(g)


def test_missing_labels_raise():
    g = Graph(2, symmetric_closure([[0, 1]]), np.zeros((2, 1)))
    for fn in (node_homophily, edge_homophily, class_insensitive_edge_homophily):
        with pytest.raises(ValueError):
            fn(g)


def test_class_insensitive_examples():
    g = labeled(4, [[0, 1], [2, 3]], [0, 0, 1, 1])
    assert class_insensitive_edge_homophily(g) == 1.0
    one = Graph(2, symmetric_closure([[0, 1]]), np.zeros((2, 1)), np.array([0, 0]), 1)
    with pytest.raises(ValueError):
        class_insensitive_edge_homophily(one)


def test_metrics_match_brute_force():
    rng = np.random.default_rng(11)
    for _ in range(40):
        g = random_graph(rng)
        y = g.labels.tolist()
        edges = g.edges.tolist()
        assert node_homophily(g) == pytest.approx(brute_node_homophily(g.num_nodes, edges, y), abs=1e-12)
        assert edge_homophily(g) == pytest.approx(brute_edge_homophily(g.undirected_pairs().tolist(), y), abs=1e-12)
        assert class_insensitive_edge_homophily(g) == pytest.approx(
            brute_class_insensitive(edges, y, g.num_classes), abs=1e-12
        )


def test_directed_metrics_use_in_neighbours():
    # 0 -> 1, 2 -> 1; node 1 hears from one same-label and one other
    g = labeled(3, [[0, 1], [2, 1]], [0, 0, 1], directed=True)
    assert node_homophily(g) == pytest.approx((0 + 0.5 + 0) / 3)
    assert edge_homophily(g) == 0.5


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_metrics_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    g = random_graph(rng)
    h = g.permute(rng.permutation(g.num_nodes))
    a, b = homophily_report(g), homophily_report(h)
    assert a.h_node == pytest.approx(b.h_node, abs=1e-12)
    assert a.h_edge == pytest.approx(b.h_edge, abs=1e-12)
    assert a.h_edge_insensitive == pytest.approx(b.h_edge_insensitive, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_metrics_in_unit_interval(seed):
    r = homophily_report(random_graph(np.random.default_rng(seed)))
    for v in (r.h_node, r.h_edge, r.h_edge_insensitive):
        assert 0.0 <= v <= 1.0


def test_planted_partition_p_in_zero_is_fully_heterophilous():
    g = planted_partition(SyntheticSpec(60, 3, 0.0, 0.3, seed=5))
    r = homophily_report(g)
    assert r.h_edge == 0.0 and r.h_node == 0.0 and r.h_edge_insensitive == 0.0


def test_planted_partition_uniform_edge_homophily_expectation():
    # with p_in = p_out every pair is equally likely, so E[H_e] is the share
    # of same-class pairs: 4 * C(100, 2) / C(400, 2) = 99 / 399
    vals = [edge_homophily(planted_partition(SyntheticSpec(400, 4, 0.3, 0.3, seed=s))) for s in range(100)]
    assert abs(np.mean(vals) - 99 / 399) < 0.02


def test_report_json_keys():
    d = homophily_report(labeled(4, [[0, 1], [2, 3]], [0, 0, 1, 1])).to_json_dict()
    assert set(d) == {"h_node", "h_edge", "h_ei", "num_classes"}
