"""GCN, GAT, GIN and GraphSAGE layers with similarity-scaled messages.

Every family is written as an explicit message stage followed by an update
stage. Between the two, each neighbour message ``m_uv`` can be multiplied
by a channel scale derived from the cosine similarity of the endpoint
embeddings at the layer input:

=======  =====================
channel  scale
=======  =====================
orig     1
hom      cos(h_u, h_v)
het      1 - cos(h_u, h_v)
=======  =====================

Self terms (the GCN/GAT self-loop, the GIN ``(1 + eps)`` term and the SAGE
root term) always keep scale 1. The ``mix`` mode runs the three channels
side by side, concatenates their outputs and projects them back to
``out_dim`` with one linear map.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph import Graph
from .homophily import CHANNELS

FAMILIES = ("gcn", "gat", "gin", "sage", "mixmp-gcn")


class GammaMode(str, Enum):
    ORIG = "orig"
    HOM = "hom"
    HET = "het"
    MIX = "mix"


@dataclass(frozen=True)
class LayerSpec:
    family: str
    in_dim: int
    out_dim: int
    gamma: str = "orig"
    share_channel_params: bool = False
    gin_eps: float = 0.0
    gin_hidden: int | None = None
    leaky_slope: float = 0.2
    num_edge_types: int = 1
    detach_scaling: bool = False

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown layer family {self.family!r}")
        if self.in_dim <= 0 or self.out_dim <= 0:
            raise ValueError("layer dimensions must be positive")
        GammaMode(self.gamma)
        if self.family == "mixmp-gcn" and self.gamma != "mix":
            raise ValueError("mixmp-gcn layers require gamma='mix'")


@dataclass(frozen=True)
class MPGraph:
    """Edge arrays prepared for message passing.

    ``src -> dst`` are neighbour edges with raw self-loops removed; messages
    are aggregated at ``dst``.
    """

    num_nodes: int
    src: np.ndarray
    dst: np.ndarray
    in_degree: np.ndarray

    @classmethod
    def from_graph(cls, graph: Graph) -> "MPGraph":
        src, dst = graph.src, graph.dst
        keep = src != dst
        src, dst = src[keep], dst[keep]
        deg = np.bincount(dst, minlength=graph.num_nodes).astype(np.float64)
        return cls(graph.num_nodes, src, dst, deg)


@dataclass
class MessageSet:
    """Neighbour messages ``messages[i]`` travelling ``src[i] -> dst[i]``
    with per-edge scales, plus one self message per node (scale 1)."""

    src: np.ndarray
    dst: np.ndarray
    messages: Tensor
    scale: Tensor | np.ndarray
    self_messages: Tensor | None
    num_nodes: int
    transformed: bool = False  # messages already carry the output projection

    def scaled(self) -> Tensor:
        s = self.scale
        if isinstance(s, Tensor):
            return self.messages * ad.reshape(s, (-1, 1))
        return ad.hadamard_mask(self.messages, np.asarray(s).reshape(-1, 1))


# ---------------------------------------------------------------------------
# parameters


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def _family_params(spec: LayerSpec, rng: np.random.Generator) -> dict[str, np.ndarray]:
    i, o = spec.in_dim, spec.out_dim
    if spec.family == "gcn":
        return {"theta": _glorot(rng, i, o)}
    if spec.family == "gat":
        return {
            "theta_s": _glorot(rng, i, o),
            "theta_t": _glorot(rng, i, o),
            "a_s": _glorot(rng, o, 1).ravel(),
            "a_t": _glorot(rng, o, 1).ravel(),
        }
    if spec.family == "gin":
        hid = spec.gin_hidden or o
        return {
            "w1": _glorot(rng, i, hid),
            "b1": np.zeros(hid),
            "w2": _glorot(rng, hid, o),
            "b2": np.zeros(o),
        }
    if spec.family == "sage":
        return {"theta1": _glorot(rng, i, o), "theta2": _glorot(rng, i, o)}
    raise ValueError(spec.family)


def init_layer_params(spec: LayerSpec, rng: np.random.Generator, prefix: str = "") -> dict[str, np.ndarray]:
    """Fresh parameters keyed ``{prefix}{channel}.{name}``.

    Single-channel layers use channel ``base``. Mixed layers either share
    one ``base`` set or own ``orig``/``hom``/``het`` sets, and always add a
    ``proj`` matrix of shape ``[3 * out_dim, out_dim]``.
    """
    out: dict[str, np.ndarray] = {}
    if spec.family == "mixmp-gcn":
        for t in range(spec.num_edge_types):
            if spec.share_channel_params:
                out[f"{prefix}w{t}"] = _glorot(rng, spec.in_dim, spec.out_dim)
            else:
                out[f"{prefix}w{t}"] = _glorot(rng, 3 * spec.in_dim, spec.out_dim)
        return out
    if spec.gamma != "mix" or spec.share_channel_params:
        groups = ["base"]
    else:
        groups = list(CHANNELS)
    for g in groups:
        for k, v in _family_params(spec, rng).items():
            out[f"{prefix}{g}.{k}"] = v
    if spec.gamma == "mix":
        out[f"{prefix}proj"] = _glorot(rng, 3 * spec.out_dim, spec.out_dim)
    return out


def _group(params: dict, prefix: str, group: str) -> dict:
    head = f"{prefix}{group}."
    return {k[len(head):]: v for k, v in params.items() if k.startswith(head)}


# ---------------------------------------------------------------------------
# messages


DENSE_SIMILARITY_MAX_NODES = 2048


def edge_similarity(h: Tensor, src: np.ndarray, dst: np.ndarray, detach: bool = False) -> Tensor:
    """Cosine similarity of ``h[src]`` and ``h[dst]`` per edge (0 for
    near-zero vectors)."""
    u = ad.row_normalize(h)
    if detach:
        u = ad.detach(u)
    n = h.shape[0]
    if n <= DENSE_SIMILARITY_MAX_NODES and n * n <= 8 * max(len(src), 1) * h.shape[1]:
        # all-pairs product is cheaper than gathering two [E, d] blocks
        full = ad.reshape(u @ ad.transpose(u), (-1,))
        return ad.take(full, src * n + dst)
    return ad.sum_(ad.take(u, src) * ad.take(u, dst), axis=-1)


def compute_messages(family: str, params: dict, h: Tensor, g: MPGraph, spec: LayerSpec | None = None) -> MessageSet:
    n = g.num_nodes
    src, dst = g.src, g.dst
    ones = np.ones(len(src))
    if family == "gcn":
        deg = g.in_degree + 1.0
        norm = 1.0 / np.sqrt(deg[src] * deg[dst])
        theta = params["theta"]
        # the projection is linear, so apply it first when that shrinks messages
        pre = theta.shape[1] < theta.shape[0]
        z = h @ theta if pre else h
        msgs = ad.hadamard_mask(ad.take(z, src), norm.reshape(-1, 1))
        self_msgs = ad.hadamard_mask(z, (1.0 / deg).reshape(-1, 1))
        return MessageSet(src, dst, msgs, ones, self_msgs, n, transformed=pre)
    if family == "gat":
        slope = spec.leaky_slope if spec is not None else 0.2
        hs = h @ params["theta_s"]
        ht = h @ params["theta_t"]
        score_s = hs @ ad.reshape(params["a_s"], (-1, 1))  # [n, 1]
        score_t = ht @ ad.reshape(params["a_t"], (-1, 1))
        # softmax for target u runs over neighbours v of u and u itself
        loops = np.arange(n)
        all_src = np.concatenate([src, loops])
        all_dst = np.concatenate([dst, loops])
        logits = ad.reshape(ad.take(score_s, all_dst) + ad.take(score_t, all_src), (-1,))
        att = ad.segment_softmax(ad.leaky_relu(logits, slope), all_dst, n)
        m = len(src)
        att_nb = ad.reshape(att[:m], (-1, 1))
        att_self = ad.reshape(att[m:], (-1, 1))
        msgs = ad.take(ht, src) * att_nb
        self_msgs = hs * att_self
        return MessageSet(src, dst, msgs, ones, self_msgs, n)
    if family == "gin":
        eps = spec.gin_eps if spec is not None else 0.0
        return MessageSet(src, dst, ad.take(h, src), ones, h * (1.0 + eps), n)
    if family == "sage":
        theta2 = params["theta2"]
        pre = theta2.shape[1] < theta2.shape[0]
        z = h @ theta2 if pre else h
        return MessageSet(src, dst, ad.take(z, src), ones, h, n, transformed=pre)
    raise ValueError(f"unknown family {family!r}")


def scale_messages(ms: MessageSet, h: Tensor, gamma: str, detach: bool = False) -> MessageSet:
    """Attach channel scales computed from the layer-input embeddings ``h``."""
    if gamma == "mix":
        raise ValueError("scale_messages takes a single channel; 'mix' combines three")
    if gamma == "orig":
        return replace(ms, scale=np.ones(len(ms.src)))
    if gamma not in CHANNELS:
        raise ValueError(f"unknown channel {gamma!r}")
    sim = edge_similarity(h, ms.src, ms.dst, detach)
    scale = sim if gamma == "hom" else 1.0 - sim
    return replace(ms, scale=scale)


def update(family: str, params: dict, ms: MessageSet, h: Tensor) -> Tensor:
    n = ms.num_nodes
    nb = ad.segment_sum(ms.scaled(), ms.dst, n)
    if family == "gcn":
        z = nb + ms.self_messages
        return z if ms.transformed else z @ params["theta"]
    if family == "gat":
        return nb + ms.self_messages
    if family == "gin":
        z = nb + ms.self_messages
        z = ad.relu(z @ params["w1"] + params["b1"])
        return z @ params["w2"] + params["b2"]
    if family == "sage":
        deg = np.bincount(ms.dst, minlength=n).astype(np.float64)
        inv = np.where(deg > 0, 1.0 / np.maximum(deg, 1.0), 0.0).reshape(-1, 1)
        agg = ad.hadamard_mask(nb, inv)
        if not ms.transformed:
            agg = agg @ params["theta2"]
        return ms.self_messages @ params["theta1"] + agg
    raise ValueError(f"unknown family {family!r}")


def channel_forward(spec: LayerSpec, params: dict, h: Tensor, g: MPGraph, gamma: str) -> Tensor:
    ms = compute_messages(spec.family, params, h, g, spec)
    ms = scale_messages(ms, h, gamma, spec.detach_scaling)
    return update(spec.family, params, ms, h)


def layer_forward(spec: LayerSpec, params: dict, h: Tensor, g: MPGraph, prefix: str = "") -> Tensor:
    """Apply one layer. ``params`` maps names (as produced by
    :func:`init_layer_params`) to tape tensors."""
    if h.shape[-1] != spec.in_dim or h.shape[0] != g.num_nodes:
        raise ad.ShapeError(f"layer expects [{g.num_nodes}, {spec.in_dim}] input, got {h.shape}")
    if spec.family == "mixmp-gcn":
        raise ValueError("mixmp-gcn layers run on dense edge tensors; use mixmp_forward")
    if spec.gamma != "mix":
        return channel_forward(spec, _group(params, prefix, "base"), h, g, spec.gamma)
    outs = []
    for ch in CHANNELS:
        group = "base" if spec.share_channel_params else ch
        outs.append(channel_forward(spec, _group(params, prefix, group), h, g, ch))
    return ad.concat(outs, axis=-1) @ params[f"{prefix}proj"]


# ---------------------------------------------------------------------------
# dense three-channel GCN over a typed edge tensor


def pairwise_similarity(h: Tensor, detach: bool = False) -> Tensor:
    """All-pairs cosine similarity over the node axis: [..., n, d] -> [..., n, n]."""
    u = ad.row_normalize(h)
    if detach:
        u = ad.detach(u)
    return u @ ad.swapaxes(u, -1, -2)


def mixmp_forward(spec: LayerSpec, params: dict, h: Tensor, adj, prefix: str = "") -> Tensor:
    """Three-channel GCN layer on dense adjacency slices.

    ``adj`` is ``[..., n_b, n, n]`` (edge type first); ``adj[..., i, u, v]``
    weights the message from ``v`` to ``u``. Per type ``i`` the channel
    aggregates are ``(H_gamma * A_i) h``; they are concatenated along the
    feature axis and mapped by ``w{i}``. The output sums over types.
    """
    if adj is None:
        raise ValueError("mixmp layers need an edge tensor")
    A = np.asarray(adj, dtype=np.float64)
    if A.shape[-3] != spec.num_edge_types:
        raise ad.ShapeError(f"edge tensor has {A.shape[-3]} types, layer expects {spec.num_edge_types}")
    if h.shape[-1] != spec.in_dim:
        raise ad.ShapeError(f"mixmp layer expects in_dim {spec.in_dim}, got {h.shape[-1]}")
    sim = pairwise_similarity(h, spec.detach_scaling)
    out = None
    for i in range(spec.num_edge_types):
        Ai = A[..., i, :, :]
        agg_orig = Ai @ h
        agg_hom = (sim * Ai) @ h
        agg_het = agg_orig - agg_hom  # (1 - H) * A_i
        W = params[f"{prefix}w{i}"]
        if spec.share_channel_params:
            hi = ad.concat([agg_orig, agg_hom, agg_het], axis=-1) @ ad.concat([W, W, W], axis=0)
        else:
            hi = ad.concat([agg_orig, agg_hom, agg_het], axis=-1) @ W
        out = hi if out is None else out + hi
    return out
