"""Label homophily statistics and the embedding-similarity message scales.

Graph metrics group directed edge entries by their destination node, so a
directed graph is measured on its in-neighbourhoods and an undirected
(symmetric-closed) graph on ordinary neighbourhoods.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .graph import Graph

EPS_NORM = 1e-12
CHANNELS = ("orig", "hom", "het")
_GRID = 2.0**52


@dataclass(frozen=True)
class HomophilyReport:
    h_node: float
    h_edge: float
    h_edge_insensitive: float
    num_classes: int

    def to_json_dict(self) -> dict:
        return {
            "h_node": self.h_node,
            "h_edge": self.h_edge,
            "h_ei": self.h_edge_insensitive,
            "num_classes": self.num_classes,
        }


@dataclass(frozen=True)
class ScalingFactor:
    value: float
    gamma: str


def cosine_similarity(a, b, eps: float = EPS_NORM) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"vector lengths differ: {a.size} vs {b.size}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < eps or nb < eps:
        return 0.0
    return float(snap_similarity(np.clip(a @ b / (na * nb), -1.0, 1.0)))


def snap_similarity(sim):
    """Round to a multiple of 2**-52 (a shift of at most 1.2e-16).

    On that grid ``1 - sim`` is exact for ``sim`` in [-1, 1], so the hom and
    het scales of one pair add to exactly 1.0 in floating point.
    """
    return np.round(np.asarray(sim, dtype=np.float64) * _GRID) / _GRID


def scale_from_similarity(sim, gamma: str):
    """Channel scale for a similarity value (scalar or array); no clamping.

    Pass values from :func:`cosine_similarity` or :func:`snap_similarity`
    for the hom + het = 1 identity to hold bit for bit.
    """
    if gamma == "orig":
        return np.ones_like(sim) if isinstance(sim, np.ndarray) else 1.0
    if gamma == "hom":
        return sim
    if gamma == "het":
        return 1.0 - sim
    raise ValueError(f"unknown channel {gamma!r}; expected one of {CHANNELS}")


def scaling_factor(h_u, h_v, gamma: str) -> float:
    if gamma not in CHANNELS:
        raise ValueError(f"unknown channel {gamma!r}; expected one of {CHANNELS}")
    return float(scale_from_similarity(cosine_similarity(h_u, h_v), gamma))


def _labels(graph: Graph) -> np.ndarray:
    if graph.labels is None:
        raise ValueError("graph has no labels")
    return graph.labels


def node_homophily_per_node(graph: Graph) -> np.ndarray:
    """Same-label share of each node's neighbours; NaN where degree is 0."""
    y = _labels(graph)
    src, dst = graph.src, graph.dst
    same = np.bincount(dst, weights=(y[src] == y[dst]).astype(float), minlength=graph.num_nodes)
    deg = np.bincount(dst, minlength=graph.num_nodes).astype(float)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(deg > 0, same / deg, np.nan)


def node_homophily(graph: Graph) -> float:
    """Mean same-label neighbour share; degree-0 nodes count as 0."""
    per = node_homophily_per_node(graph)
    return float(np.nan_to_num(per, nan=0.0).mean())


def edge_homophily(graph: Graph) -> float:
    y = _labels(graph)
    edges = graph.edges if graph.directed else graph.undirected_pairs()
    if len(edges) == 0:
        raise ValueError("edge homophily undefined on a graph without edges")
    return float(np.mean(y[edges[:, 0]] == y[edges[:, 1]]))


def class_insensitive_edge_homophily(graph: Graph) -> float:
    r"""Class-size corrected edge homophily.

    .. math:: \frac{1}{C-1}\sum_k \max(0,\, h_k - |C_k|/n)

    where ``h_k`` is the share of directed edge entries ending at a class-k
    node whose source is also class k.
    """
    y = _labels(graph)
    C = graph.num_classes
    if C < 2:
        raise ValueError("class-insensitive homophily needs at least two classes")
    labeled = y >= 0
    src, dst = graph.src, graph.dst
    keep = labeled[src] & labeled[dst]
    src, dst = src[keep], dst[keep]
    hits = np.bincount(y[dst], weights=(y[src] == y[dst]).astype(float), minlength=C)
    total = np.bincount(y[dst], minlength=C).astype(float)
    with np.errstate(invalid="ignore", divide="ignore"):
        h = np.where(total > 0, hits / total, 0.0)
    props = np.bincount(y[labeled], minlength=C) / labeled.sum()
    return float(np.clip(h - props, 0.0, None).sum() / (C - 1))


def homophily_report(graph: Graph) -> HomophilyReport:
    return HomophilyReport(
        h_node=node_homophily(graph),
        h_edge=edge_homophily(graph),
        h_edge_insensitive=class_insensitive_edge_homophily(graph),
        num_classes=graph.num_classes,
    )
