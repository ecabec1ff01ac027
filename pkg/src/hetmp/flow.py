"""Affine-coupling normalizing flow over small typed graphs.

A graph with ``n`` nodes, ``k`` node types and ``n_b`` edge types is held as

* ``X``: one-hot node types, ``[n, k]``
* ``B``: bond tensor, ``[n_b + 1, n, n]``; channel ``n_b`` marks "no edge"
  (the diagonal included)

The bond flow maps a dequantized ``B`` to ``h_b`` through checkerboard-masked
coupling layers whose coupling functions are small convolution stacks. The
atom flow maps a dequantized ``X`` to ``h_a`` through row-striped coupling
layers whose coupling functions are three-channel GCNs on the adjacency
recovered from ``B``. Both latents are zero-mean Gaussians.

Model files are JSON::

    {"format": "hetmp-flow", "version": 1,
     "config": {...FlowConfig fields...},
     "steps_trained": int,
     "params": {name: {"shape": [...], "data": [...]}},
     "state": {bn_name: {"mean": [...], "var": [...]}}}

Floats are written by :mod:`json` (shortest round-trip repr), so a saved
model reloads bit-identically.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph import Graph, atomic_write_text
from .layers import LayerSpec, mixmp_forward
from .optim import AdamW

MODEL_FORMAT = "hetmp-flow"
MODEL_VERSION = 1
HIST_EDGES = np.round(np.linspace(0.0, 1.0, 11), 10)


class MaskError(ValueError):
    """Degenerate or malformed coupling mask."""


class FlowError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# masks and coupling layers


@dataclass(frozen=True, eq=False)
class MaskSpec:
    mask: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mask, dtype=np.float64)
        if not np.all((m == 0) | (m == 1)):
            raise MaskError("mask entries must be 0 or 1")
        if m.size and np.all(m == 1):
            raise MaskError("all-ones mask leaves the coupling function no input")
        m.setflags(write=False)
        object.__setattr__(self, "mask", m)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.mask.shape

    @classmethod
    def striped(cls, index: int, rows: int, cols: int, period: int | None = None) -> "MaskSpec":
        """Rows ``j`` with ``j % period == index % period`` are transformed."""
        period = period or rows
        m = np.zeros((rows, cols))
        m[np.arange(rows) % period == index % period] = 1.0
        return cls(m)

    @classmethod
    def checkerboard(cls, index: int, channels: int, n: int) -> "MaskSpec":
        """Pairs ``(u, v)`` with ``u + v + index`` even are transformed, in
        every channel."""
        u, v = np.indices((n, n))
        m = ((u + v + index) % 2 == 0).astype(np.float64)
        return cls(np.broadcast_to(m, (channels, n, n)).copy())


def mask_coverage(masks: list[MaskSpec]) -> np.ndarray:
    """Elementwise union of a sequence of masks."""
    out = np.zeros(masks[0].shape, dtype=bool)
    for m in masks:
        out |= m.mask.astype(bool)
    return out


CouplingFn = Callable[[Tensor], tuple[Tensor, Tensor]]


@dataclass(frozen=True, eq=False)
class CouplingLayer:
    """Mask plus a map from the frozen part to ``(log S, T)``."""

    mask: MaskSpec
    coupling_fn: CouplingFn


def _to_tensor(x, tape: ad.Tape | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return (tape or ad.Tape()).constant(x)


def _check_shape(x: Tensor, layer: CouplingLayer) -> None:
    if tuple(x.shape[1:]) != layer.mask.shape:
        raise ad.ShapeError(f"input {x.shape} does not match mask {layer.mask.shape} (batch axis first)")


def acl_forward(x, layer: CouplingLayer) -> tuple[Tensor, Tensor]:
    """``Y = M*(S*X + T) + (1-M)*X`` with ``(log S, T) = f((1-M)*X)``.

    ``x`` carries a leading batch axis. Returns ``Y`` and the per-sample
    log-determinant (sum of ``log S`` over masked entries).
    """
    x = _to_tensor(x)
    _check_shape(x, layer)
    M = layer.mask.mask
    frozen = ad.hadamard_mask(x, 1.0 - M)
    log_s, t = layer.coupling_fn(frozen)
    y = ad.hadamard_mask(x * ad.exp(log_s) + t, M) + frozen
    axes = tuple(range(1, x.ndim))
    logdet = ad.sum_(ad.hadamard_mask(log_s, M), axis=axes)
    return y, logdet


def acl_inverse(y, layer: CouplingLayer) -> Tensor:
    """``X = M*(M*Y - T)/S + (1-M)*Y`` with ``(log S, T) = f((1-M)*Y)``."""
    y = _to_tensor(y)
    _check_shape(y, layer)
    M = layer.mask.mask
    frozen = ad.hadamard_mask(y, 1.0 - M)
    log_s, t = layer.coupling_fn(frozen)
    try:
        x1 = ad.hadamard_mask((ad.hadamard_mask(y, M) - t) * ad.exp(-log_s), M)
    except ad.NonFiniteError as exc:
        raise FlowError("non-finite value while inverting a coupling layer") from exc
    return x1 + frozen


def flow_forward(x, layers: list[CouplingLayer]) -> tuple[Tensor, Tensor]:
    x = _to_tensor(x)
    total = None
    for layer in layers:
        x, ld = acl_forward(x, layer)
        total = ld if total is None else total + ld
    return x, total


def flow_inverse(y, layers: list[CouplingLayer]) -> Tensor:
    y = _to_tensor(y)
    for layer in reversed(layers):
        y = acl_inverse(y, layer)
    return y


# ---------------------------------------------------------------------------
# coupling networks


def _lift_params(params: dict, tape: ad.Tape) -> dict[str, Tensor]:
    return {k: v if isinstance(v, Tensor) else tape.constant(v) for k, v in params.items()}


def conv_coupling(params: dict, prefix: str) -> CouplingFn:
    """Two 3x3 convolutions with a ReLU between; output channels split into
    ``log S`` (tanh-bounded) and ``T``."""

    def fn(x2: Tensor) -> tuple[Tensor, Tensor]:
        p = _lift_params({k: v for k, v in params.items() if k.startswith(prefix)}, x2.tape)
        h = ad.relu(ad.conv2d(x2, p[prefix + "conv1.w"], p[prefix + "conv1.b"]))
        out = ad.conv2d(h, p[prefix + "conv2.w"], p[prefix + "conv2.b"])
        c = x2.shape[1]
        return ad.tanh(out[:, :c]), out[:, c:]

    return fn


def gnn_coupling(params: dict, prefix: str, adj: np.ndarray, spec: LayerSpec,
                 running: dict | None = None, train: bool = False) -> CouplingFn:
    """Three-channel GCN -> batch norm -> ReLU -> linear -> tanh -> linear.

    ``adj`` is ``[B, n_b, n, n]`` (message from ``v`` to ``u`` at ``[.., u, v]``).
    ``running`` holds batch-norm statistics; ``None`` disables batch norm.
    """

    def fn(x2: Tensor) -> tuple[Tensor, Tensor]:
        p = _lift_params({k: v for k, v in params.items() if k.startswith(prefix)}, x2.tape)
        h = mixmp_forward(spec, p, x2, adj, prefix=prefix + "gnn.")
        if running is not None:
            h = ad.batch_norm(h, p[prefix + "bn.weight"], p[prefix + "bn.bias"], running, train)
        h = ad.relu(h)
        h = ad.tanh(h @ p[prefix + "lin1.w"] + p[prefix + "lin1.b"])
        out = h @ p[prefix + "lin2.w"] + p[prefix + "lin2.b"]
        k = x2.shape[-1]
        return ad.tanh(out[..., :k]), out[..., k:]

    return fn


def _glorot(rng, shape, fan_in, fan_out) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_conv_coupling(rng: np.random.Generator, channels: int, hidden: int, prefix: str,
                       identity: bool = True) -> dict[str, np.ndarray]:
    out = {
        prefix + "conv1.w": _glorot(rng, (hidden, channels, 3, 3), 9 * channels, 9 * hidden),
        prefix + "conv1.b": np.zeros(hidden),
    }
    if identity:
        out[prefix + "conv2.w"] = np.zeros((2 * channels, hidden, 3, 3))
        out[prefix + "conv2.b"] = np.zeros(2 * channels)
    else:
        out[prefix + "conv2.w"] = _glorot(rng, (2 * channels, hidden, 3, 3), 9 * hidden, 18 * channels)
        out[prefix + "conv2.b"] = rng.normal(0.0, 0.1, 2 * channels)
    return out


def init_gnn_coupling(rng: np.random.Generator, spec: LayerSpec, mlp_hidden: int, prefix: str,
                      identity: bool = True) -> dict[str, np.ndarray]:
    k, hid = spec.in_dim, spec.out_dim
    rows = k if spec.share_channel_params else 3 * k
    out = {f"{prefix}gnn.w{t}": _glorot(rng, (rows, hid), rows, hid) for t in range(spec.num_edge_types)}
    out.update({
        prefix + "bn.weight": np.ones(hid),
        prefix + "bn.bias": np.zeros(hid),
        prefix + "lin1.w": _glorot(rng, (hid, mlp_hidden), hid, mlp_hidden),
        prefix + "lin1.b": np.zeros(mlp_hidden),
    })
    if identity:
        out[prefix + "lin2.w"] = np.zeros((mlp_hidden, 2 * k))
        out[prefix + "lin2.b"] = np.zeros(2 * k)
    else:
        out[prefix + "lin2.w"] = _glorot(rng, (mlp_hidden, 2 * k), mlp_hidden, 2 * k)
        out[prefix + "lin2.b"] = rng.normal(0.0, 0.1, 2 * k)
    return out


# ---------------------------------------------------------------------------
# the model


VARIANCE_MODES = (0, 1, 2)


@dataclass(frozen=True)
class FlowConfig:
    num_nodes: int = 9
    num_node_types: int = 4
    num_edge_types: int = 2
    layers_atom: int = 8
    layers_bond: int = 4
    gnn_hidden: int = 16
    mlp_hidden: int = 16
    conv_hidden: int = 16
    share_channel_params: bool = False
    batch_norm: bool = True
    variance_mode: int = 1
    dequant_scale: float = 0.6

    def __post_init__(self):
        if self.variance_mode not in VARIANCE_MODES:
            raise ValueError(f"variance_mode must be one of {VARIANCE_MODES}")
        if min(self.num_nodes, self.num_node_types, self.num_edge_types) < 1:
            raise ValueError("graph dimensions must be positive")
        if self.num_nodes < 2:
            raise ValueError("row-striped atom masks need at least two nodes")
        if self.layers_atom < 1 or self.layers_bond < 1:
            raise ValueError("each flow needs at least one coupling layer")
        if not 0.0 <= self.dequant_scale < 1.0:
            raise ValueError("dequant_scale must lie in [0, 1) so argmax recovers the input")

    @property
    def bond_channels(self) -> int:
        return self.num_edge_types + 1

    @property
    def stripe_period(self) -> int:
        # shorter period when there are fewer layers than rows, so every row is transformed
        return min(self.num_nodes, self.layers_atom)

    @property
    def atom_dim(self) -> int:
        return self.num_nodes * self.num_node_types

    @property
    def bond_dim(self) -> int:
        return self.bond_channels * self.num_nodes * self.num_nodes

    def atom_spec(self) -> LayerSpec:
        return LayerSpec(
            family="mixmp-gcn",
            in_dim=self.num_node_types,
            out_dim=self.gnn_hidden,
            gamma="mix",
            share_channel_params=self.share_channel_params,
            num_edge_types=self.num_edge_types,
        )


@dataclass
class FlowModel:
    config: FlowConfig
    params: dict[str, np.ndarray]
    state: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    steps_trained: int = 0

    def atom_masks(self) -> list[MaskSpec]:
        c = self.config
        return [MaskSpec.striped(i, c.num_nodes, c.num_node_types, c.stripe_period) for i in range(c.layers_atom)]

    def bond_masks(self) -> list[MaskSpec]:
        c = self.config
        return [MaskSpec.checkerboard(i, c.bond_channels, c.num_nodes) for i in range(c.layers_bond)]

    def bond_layers(self, params: dict | None = None) -> list[CouplingLayer]:
        params = self.params if params is None else params
        return [CouplingLayer(m, conv_coupling(params, f"b{i}.")) for i, m in enumerate(self.bond_masks())]

    def atom_layers(self, adj: np.ndarray, params: dict | None = None, train: bool = False) -> list[CouplingLayer]:
        params = self.params if params is None else params
        spec = self.config.atom_spec()
        out = []
        for i, m in enumerate(self.atom_masks()):
            running = self.state.get(f"a{i}.bn") if self.config.batch_norm else None
            out.append(CouplingLayer(m, gnn_coupling(params, f"a{i}.", adj, spec, running, train)))
        return out


def init_flow(config: FlowConfig, seed: int = 0, identity: bool = True) -> FlowModel:
    """Fresh model. With ``identity`` the last layer of every coupling net
    is zero, so the untrained flow is the identity map."""
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    state: dict[str, dict[str, np.ndarray]] = {}
    spec = config.atom_spec()
    for i in range(config.layers_bond):
        params.update(init_conv_coupling(rng, config.bond_channels, config.conv_hidden, f"b{i}.", identity))
    for i in range(config.layers_atom):
        params.update(init_gnn_coupling(rng, spec, config.mlp_hidden, f"a{i}.", identity))
        if config.batch_norm:
            state[f"a{i}.bn"] = {"mean": np.zeros(config.gnn_hidden), "var": np.ones(config.gnn_hidden)}
    if config.variance_mode == 1:
        params["ln_mu"] = np.zeros(())
    elif config.variance_mode == 2:
        params["ln_mu_a"] = np.zeros(())
        params["ln_mu_b"] = np.zeros(())
    return FlowModel(config, params, state)


def latent_log_variances(config: FlowConfig, params: dict) -> tuple:
    """``(ln mu_a, ln mu_b)``; floats in mode 0, parameter entries otherwise."""
    if config.variance_mode == 0:
        return 0.0, 0.0
    if config.variance_mode == 1:
        return params["ln_mu"], params["ln_mu"]
    return params["ln_mu_a"], params["ln_mu_b"]


# ---------------------------------------------------------------------------
# graph <-> tensors


def graph_to_tensors(graph: Graph, config: FlowConfig) -> tuple[np.ndarray, np.ndarray]:
    n, k, nb = config.num_nodes, config.num_node_types, config.num_edge_types
    if graph.num_nodes != n:
        raise ValueError(f"flow expects {n}-node graphs, got {graph.num_nodes}")
    if graph.labels is None or np.any(graph.labels < 0) or np.any(graph.labels >= k):
        raise ValueError(f"flow graphs need node types in [0, {k})")
    if graph.num_edge_types > nb:
        raise ValueError(f"graph has {graph.num_edge_types} edge types, flow supports {nb}")
    X = np.eye(k)[graph.labels]
    B = np.zeros((nb + 1, n, n))
    types = graph.edge_types if graph.edge_types is not None else np.zeros(graph.num_edges, int)
    keep = graph.src != graph.dst
    B[types[keep], graph.src[keep], graph.dst[keep]] = 1.0
    B[nb] = 1.0 - B[:nb].sum(axis=0)
    return X, B


def batch_tensors(graphs: list[Graph], config: FlowConfig) -> tuple[np.ndarray, np.ndarray]:
    pairs = [graph_to_tensors(g, config) for g in graphs]
    return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])


def adjacency_from_bonds(B: np.ndarray) -> np.ndarray:
    """Typed adjacency ``[.., n_b, n, n]`` (receiver first) from a one-hot bond tensor."""
    return np.swapaxes(B[..., :-1, :, :], -1, -2)


def discretize_bonds(B: np.ndarray) -> np.ndarray:
    """Bond-type index per pair (``n_b`` = no edge): symmetrize, argmax over
    channels, clear the diagonal."""
    sym = 0.5 * (B + np.swapaxes(B, -1, -2))
    idx = sym.argmax(axis=-3)
    nb = B.shape[-3] - 1
    n = B.shape[-1]
    idx[..., np.arange(n), np.arange(n)] = nb
    return idx


def one_hot_bonds(idx: np.ndarray, channels: int) -> np.ndarray:
    return np.moveaxis(np.eye(channels)[idx], -1, -3)


def discretize_atoms(X: np.ndarray) -> np.ndarray:
    return X.argmax(axis=-1)


def tensors_to_graph(types: np.ndarray, bond_idx: np.ndarray, config: FlowConfig) -> Graph:
    n, k, nb = config.num_nodes, config.num_node_types, config.num_edge_types
    iu, ju = np.triu_indices(n, k=1)
    t = bond_idx[iu, ju]
    keep = t < nb
    pairs = np.c_[iu[keep], ju[keep]]
    edges = np.concatenate([pairs, pairs[:, ::-1]]) if len(pairs) else np.zeros((0, 2), int)
    etypes = np.concatenate([t[keep], t[keep]]) if len(pairs) else np.zeros(0, int)
    order = np.lexsort((edges[:, 1], edges[:, 0]))
    return Graph(
        num_nodes=n,
        edges=edges[order],
        node_features=np.eye(k)[types],
        labels=types,
        num_classes=k,
        edge_types=etypes[order],
        num_edge_types=nb,
        directed=False,
    )


def dequantize(x: np.ndarray, scale: float, rng: np.random.Generator | None) -> np.ndarray:
    if rng is None or scale == 0.0:
        return x
    return x + scale * rng.random(x.shape)


# ---------------------------------------------------------------------------
# likelihood


def gaussian_nll(h: Tensor, ln_mu) -> Tensor:
    """Per-sample NLL of ``h`` under N(0, mu) (``mu`` is a variance)."""
    axes = tuple(range(1, h.ndim))
    dim = int(np.prod(h.shape[1:]))
    sq = ad.sum_(ad.square(h), axis=axes)
    if isinstance(ln_mu, Tensor):
        return sq * ad.exp(-ln_mu) * 0.5 + (ln_mu * (0.5 * dim) + 0.5 * dim * math.log(2 * math.pi))
    return sq * (0.5 * math.exp(-ln_mu)) + 0.5 * dim * (math.log(2 * math.pi) + ln_mu)


def encode_tensors(model: FlowModel, X, B, adj, params: dict | None = None, train: bool = False,
                   tape: ad.Tape | None = None) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """``(h_a, logdet_a, h_b, logdet_b)`` for batched (dequantized) inputs."""
    tape = tape or ad.Tape()
    params = model.params if params is None else params
    hb, ldb = flow_forward(_to_tensor(B, tape), model.bond_layers(params))
    ha, lda = flow_forward(_to_tensor(X, tape), model.atom_layers(adj, params, train))
    return ha, lda, hb, ldb


def flow_nll(model: FlowModel, graphs: list[Graph], rng: np.random.Generator | None = None,
             params: dict | None = None, train: bool = False, tape: ad.Tape | None = None):
    """Per-graph ``(L_a, L_b)`` in nats. Inputs are dequantized with ``rng``
    (no noise when ``rng`` is None)."""
    c = model.config
    X, B = batch_tensors(graphs, c)
    adj = adjacency_from_bonds(B)
    Xq = dequantize(X, c.dequant_scale, rng)
    Bq = dequantize(B, c.dequant_scale, rng)
    tape = tape or ad.Tape()
    params = model.params if params is None else params
    ha, lda, hb, ldb = encode_tensors(model, Xq, Bq, adj, params, train, tape)
    ln_a, ln_b = latent_log_variances(c, params)
    L_a = gaussian_nll(ha, ln_a) - lda
    L_b = gaussian_nll(hb, ln_b) - ldb
    return L_a, L_b


@dataclass
class FlowTrainResult:
    model: FlowModel
    nll_history: list[float]  # mean (L_a + L_b) per graph, per dimension


def train_flow(model: FlowModel, graphs: list[Graph], steps: int, batch_size: int = 32,
               lr: float = 1e-3, weight_decay: float = 0.0, seed: int = 0) -> FlowTrainResult:
    """Minimise the dequantized NLL with AdamW on random mini-batches."""
    if not graphs:
        raise ValueError("flow training needs at least one graph")
    if steps < 0:
        raise ValueError("steps must be non-negative")
    rng = np.random.default_rng([seed, 2])
    c = model.config
    dims = c.atom_dim + c.bond_dim
    opt = AdamW(lr=lr, weight_decay=weight_decay)
    params = dict(model.params)
    history = []
    for _ in range(steps):
        idx = rng.choice(len(graphs), size=min(batch_size, len(graphs)), replace=False)
        tape = ad.Tape()
        P = tape.params_from(params)
        try:
            L_a, L_b = flow_nll(model, [graphs[i] for i in idx], rng, P, train=True, tape=tape)
            loss = ad.mean(L_a + L_b) * (1.0 / dims)
        except ad.NonFiniteError as exc:
            raise FlowError(f"non-finite NLL at step {model.steps_trained + 1}") from exc
        history.append(float(loss.data))
        grads = tape.grad(loss)
        tape.release()
        params = opt.step(params, grads)
        model.params = params
        model.steps_trained += 1
    return FlowTrainResult(model, history)


# ---------------------------------------------------------------------------
# encoding and generation


def encode(model: FlowModel, graphs: list[Graph], rng: np.random.Generator | None = None):
    """Latents ``(h_a, h_b)`` of a batch of graphs (eval-mode statistics)."""
    c = model.config
    X, B = batch_tensors(graphs, c)
    adj = adjacency_from_bonds(B)
    Xq = dequantize(X, c.dequant_scale, rng)
    Bq = dequantize(B, c.dequant_scale, rng)
    tape = ad.Tape(check_finite=True)
    ha, _, hb, _ = encode_tensors(model, Xq, Bq, adj, tape=tape)
    tape.release()
    return ha.data, hb.data


def decode(model: FlowModel, h_a: np.ndarray, h_b: np.ndarray | None = None,
           bond_idx: np.ndarray | None = None) -> list[Graph]:
    """Invert the flows and discretize. Pass ``bond_idx`` to skip the bond
    flow and condition the atom flow on a given topology."""
    c = model.config
    if bond_idx is None:
        if h_b is None:
            raise ValueError("decode needs h_b or bond_idx")
        B = flow_inverse(h_b, model.bond_layers()).data
        bond_idx = discretize_bonds(B)
    Bh = one_hot_bonds(bond_idx, c.bond_channels)
    adj = adjacency_from_bonds(Bh)
    X = flow_inverse(h_a, model.atom_layers(adj)).data
    types = discretize_atoms(X)
    return [tensors_to_graph(types[i], bond_idx[i], c) for i in range(len(types))]


GENERATION_MODES = ("full", "true_adj")


def generate(model: FlowModel, n: int, mode: str = "full", data_pool: list[Graph] | None = None,
             seed: int = 0, temperature: float = 1.0) -> list[Graph]:
    """Sample ``n`` graphs. ``true_adj`` draws each topology uniformly from
    ``data_pool`` and only runs the atom flow."""
    if mode not in GENERATION_MODES:
        raise ValueError(f"mode must be one of {GENERATION_MODES}")
    if model.steps_trained <= 0:
        raise FlowError("model is untrained")
    if n < 0:
        raise ValueError("n must be non-negative")
    if n == 0:
        return []
    c = model.config
    rng = np.random.default_rng([seed, 3])
    ln_a, ln_b = latent_log_variances(c, model.params)
    sd_a = temperature * math.exp(0.5 * float(np.asarray(ln_a)))
    sd_b = temperature * math.exp(0.5 * float(np.asarray(ln_b)))
    if mode == "true_adj":
        if not data_pool:
            raise ValueError("true_adj generation needs a non-empty data pool")
        picks = rng.integers(len(data_pool), size=n)
        _, B = batch_tensors([data_pool[i] for i in picks], c)
        bond_idx = B.argmax(axis=-3)
        h_a = sd_a * rng.standard_normal((n, c.num_nodes, c.num_node_types))
        return decode(model, h_a, bond_idx=bond_idx)
    h_b = sd_b * rng.standard_normal((n, c.bond_channels, c.num_nodes, c.num_nodes))
    h_a = sd_a * rng.standard_normal((n, c.num_nodes, c.num_node_types))
    return decode(model, h_a, h_b)


# ---------------------------------------------------------------------------
# homophily of generated graphs


@dataclass
class HomophilyHistogram:
    edges: np.ndarray
    counts: np.ndarray
    values: np.ndarray  # per-graph node homophily that was binned

    @property
    def mean(self) -> float:
        return float(self.values.mean()) if len(self.values) else float("nan")

    def to_csv(self) -> str:
        rows = ["bin_lo,bin_hi,count"]
        for lo, hi, k in zip(self.edges[:-1], self.edges[1:], self.counts):
            rows.append(f"{lo:.1f},{hi:.1f},{int(k)}")
        return "\n".join(rows) + "\n"


def graph_node_homophily(graph: Graph) -> float | None:
    """Mean same-type neighbour share over non-isolated nodes; None when
    the graph has no edges."""
    keep = graph.src != graph.dst
    src, dst = graph.src[keep], graph.dst[keep]
    if len(src) == 0:
        return None
    y = graph.labels
    n = graph.num_nodes
    same = np.bincount(dst, weights=(y[src] == y[dst]).astype(float), minlength=n)
    deg = np.bincount(dst, minlength=n)
    live = deg > 0
    return float(np.mean(same[live] / deg[live]))


def homophily_of_generated(graphs: list[Graph]) -> HomophilyHistogram:
    vals = [graph_node_homophily(g) for g in graphs]
    vals = np.asarray([v for v in vals if v is not None], dtype=np.float64)
    counts, _ = np.histogram(vals, bins=HIST_EDGES)
    return HomophilyHistogram(HIST_EDGES.copy(), counts, vals)


# ---------------------------------------------------------------------------
# toy data


def toy_graph_pool(num_graphs: int, num_nodes: int = 9, num_node_types: int = 4,
                   num_edge_types: int = 2, p_in: float = 0.5, p_out: float = 0.2,
                   seed: int = 0) -> list[Graph]:
    """Random typed graphs: uniform node types, each pair linked with
    probability ``p_in`` (same type) or ``p_out`` (different types), edge
    types uniform."""
    rng = np.random.default_rng(seed)
    iu, ju = np.triu_indices(num_nodes, k=1)
    out = []
    for _ in range(num_graphs):
        types = rng.integers(num_node_types, size=num_nodes)
        prob = np.where(types[iu] == types[ju], p_in, p_out)
        keep = rng.random(len(iu)) < prob
        et = rng.integers(num_edge_types, size=int(keep.sum()))
        pairs = np.c_[iu[keep], ju[keep]]
        edges = np.concatenate([pairs, pairs[:, ::-1]])
        etypes = np.concatenate([et, et])
        order = np.lexsort((edges[:, 1], edges[:, 0]))
        out.append(Graph(num_nodes, edges[order], np.eye(num_node_types)[types], types,
                         num_node_types, etypes[order], num_edge_types, False))
    return out


# ---------------------------------------------------------------------------
# persistence


def model_to_json_dict(model: FlowModel) -> dict:
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "config": asdict(model.config),
        "steps_trained": int(model.steps_trained),
        "params": {
            k: {"shape": list(np.shape(v)), "data": np.asarray(v, dtype=np.float64).ravel().tolist()}
            for k, v in sorted(model.params.items())
        },
        "state": {
            k: {s: np.asarray(a).tolist() for s, a in sorted(v.items())}
            for k, v in sorted(model.state.items())
        },
    }


def model_from_json_dict(obj: dict) -> FlowModel:
    if obj.get("format") != MODEL_FORMAT:
        raise ValueError("not a flow model file")
    if obj.get("version") != MODEL_VERSION:
        raise ValueError(f"unsupported flow model version {obj.get('version')!r}")
    config = FlowConfig(**obj["config"])
    params = {
        k: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in obj["params"].items()
    }
    state = {k: {s: np.asarray(a, dtype=np.float64) for s, a in v.items()} for k, v in obj["state"].items()}
    expected = set(init_flow(config).params)
    if set(params) != expected:
        raise ValueError("flow model parameters do not match its config")
    return FlowModel(config, params, state, int(obj.get("steps_trained", 0)))


def save_model(model: FlowModel, path) -> None:
    atomic_write_text(path, json.dumps(model_to_json_dict(model), allow_nan=False))


def load_model(path) -> FlowModel:
    return model_from_json_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def graphs_to_json(graphs: list[Graph]) -> dict:
    return {"graphs": [g.to_json_dict() for g in graphs]}
