"""Graph container, file ingestion, random splits and planted-partition graphs."""

from __future__ import annotations

import csv
import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class GraphFormatError(ValueError):
    """Raised when a graph file cannot be parsed or violates an invariant."""


class IndexOutOfRange(GraphFormatError):
    pass


class LabelOutOfRange(GraphFormatError):
    pass


def symmetric_closure(edges: np.ndarray) -> np.ndarray:
    """Return the sorted, duplicate-free union of ``edges`` and their reverses.

    Self-loops are kept once. Idempotent.
    """
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if edges.size == 0:
        return edges.copy()
    both = np.concatenate([edges, edges[:, ::-1]], axis=0)
    if both.min() < 0:
        return np.unique(both, axis=0)
    # one int64 key per pair keeps the sort one-dimensional
    base = int(both.max()) + 1
    keys = np.unique(both[:, 0] * base + both[:, 1])
    return np.stack([keys // base, keys % base], axis=1)


@dataclass(frozen=True, eq=False)
class Graph:
    num_nodes: int
    edges: np.ndarray  # [m, 2] directed entries (src, dst)
    node_features: np.ndarray
    labels: np.ndarray | None = None
    num_classes: int = 0
    edge_types: np.ndarray | None = None  # [m] ints in [0, num_edge_types)
    num_edge_types: int = 1
    directed: bool = False

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        feats = np.asarray(self.node_features, dtype=np.float64)
        if feats.ndim == 1:
            feats = feats.reshape(self.num_nodes, -1)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "node_features", feats)
        if self.labels is not None:
            object.__setattr__(self, "labels", np.asarray(self.labels, dtype=np.int64))
        if self.edge_types is not None:
            object.__setattr__(self, "edge_types", np.asarray(self.edge_types, dtype=np.int64))
        for arr in (self.edges, self.node_features, self.labels, self.edge_types):
            if arr is not None:
                arr.setflags(write=False)
        self.validate()

    def validate(self) -> None:
        n = self.num_nodes
        if self.edges.size and (self.edges.min() < 0 or self.edges.max() >= n):
            bad = self.edges[(self.edges < 0) | (self.edges >= n)][0]
            raise IndexOutOfRange(f"edge endpoint {bad} outside [0, {n})")
        if self.node_features.shape[0] != n:
            raise GraphFormatError(
                f"feature rows {self.node_features.shape[0]} != num_nodes {n}"
            )
        if self.labels is not None:
            if self.labels.shape != (n,):
                raise GraphFormatError(f"labels shape {self.labels.shape} != ({n},)")
            known = self.labels[self.labels >= 0]
            if known.size and known.max() >= self.num_classes:
                raise LabelOutOfRange(
                    f"label {known.max()} outside [0, {self.num_classes})"
                )
            if np.any(self.labels < -1):
                raise LabelOutOfRange("labels below -1")
        if self.edge_types is not None:
            if self.edge_types.shape != (len(self.edges),):
                raise GraphFormatError("edge_types must give one type per edge")
            if self.edge_types.size and (
                self.edge_types.min() < 0 or self.edge_types.max() >= self.num_edge_types
            ):
                raise GraphFormatError("edge type outside [0, num_edge_types)")
        if not self.directed and len(self.edges):
            base = self.num_nodes
            fwd = np.sort(self.edges[:, 0] * base + self.edges[:, 1])
            rev = np.sort(self.edges[:, 1] * base + self.edges[:, 0])
            if not np.array_equal(fwd, rev) or (np.diff(fwd) == 0).any():
                raise GraphFormatError("undirected edge list is not symmetric-closed")

    # -- derived views ------------------------------------------------------

    @property
    def src(self) -> np.ndarray:
        return self.edges[:, 0]

    @property
    def dst(self) -> np.ndarray:
        return self.edges[:, 1]

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @property
    def labeled_mask(self) -> np.ndarray:
        if self.labels is None:
            return np.zeros(self.num_nodes, dtype=bool)
        return self.labels >= 0

    def in_degree(self) -> np.ndarray:
        return np.bincount(self.dst, minlength=self.num_nodes)

    def undirected_pairs(self) -> np.ndarray:
        """Each undirected edge once as (min, max); self-loops included."""
        e = np.sort(self.edges, axis=1)
        if not len(e):
            return e
        base = self.num_nodes
        keys = np.unique(e[:, 0] * base + e[:, 1])
        return np.stack([keys // base, keys % base], axis=1)

    def edge_tensor(self) -> np.ndarray:
        """One-hot [n, n, num_edge_types] tensor of typed edges."""
        E = np.zeros((self.num_nodes, self.num_nodes, self.num_edge_types))
        types = self.edge_types if self.edge_types is not None else np.zeros(self.num_edges, int)
        E[self.src, self.dst, types] = 1.0
        return E

    def permute(self, perm: np.ndarray) -> "Graph":
        """Relabel node ``i`` as ``perm[i]``."""
        perm = np.asarray(perm)
        inv = np.argsort(perm)
        return Graph(
            num_nodes=self.num_nodes,
            edges=perm[self.edges],
            node_features=self.node_features[inv],
            labels=None if self.labels is None else self.labels[inv],
            num_classes=self.num_classes,
            edge_types=self.edge_types,
            num_edge_types=self.num_edge_types,
            directed=self.directed,
        )

    def with_features(self, features: np.ndarray) -> "Graph":
        return Graph(
            self.num_nodes, self.edges, features, self.labels, self.num_classes,
            self.edge_types, self.num_edge_types, self.directed,
        )

    def to_json_dict(self) -> dict:
        if self.edge_types is not None:
            edges = [[int(u), int(v), int(t)] for (u, v), t in zip(self.edges, self.edge_types)]
        else:
            edges = [[int(u), int(v)] for u, v in self.edges]
        out = {
            "num_nodes": int(self.num_nodes),
            "directed": bool(self.directed),
            "edges": edges,
            "features": self.node_features.tolist(),
            "labels": [] if self.labels is None else [int(x) for x in self.labels],
            "num_classes": int(self.num_classes),
        }
        if self.edge_types is not None:
            out["num_edge_types"] = int(self.num_edge_types)
        return out


def graph_from_json_dict(obj: dict) -> Graph:
    try:
        n = int(obj["num_nodes"])
        directed = bool(obj.get("directed", False))
        raw = obj.get("edges", [])
        feats = obj.get("features")
        labels = obj.get("labels") or None
        num_classes = int(obj.get("num_classes", 0))
        n_types = obj.get("num_edge_types")
    except (KeyError, TypeError, ValueError) as exc:
        raise GraphFormatError(f"malformed graph-json: {exc}") from exc
    typed = any(len(e) == 3 for e in raw)
    if any(len(e) not in (2, 3) for e in raw) or (typed and any(len(e) != 3 for e in raw)):
        raise GraphFormatError("edges must all be [u, v] or all be [u, v, type]")
    arr = np.asarray(raw, dtype=np.int64).reshape(-1, 3 if typed else 2)
    types = arr[:, 2] if typed else None
    if n_types is None:
        n_types = int(types.max()) + 1 if typed and len(types) else 1
    if feats is None or len(feats) == 0:
        feats = np.zeros((n, 0))
    return _assemble(n, arr[:, :2], types, int(n_types), feats, labels, num_classes, directed)


def _assemble(n, edges, types, n_types, feats, labels, num_classes, directed) -> Graph:
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if edges.size and (edges.min() < 0 or edges.max() >= n):
        bad = int(edges[(edges < 0) | (edges >= n)][0])
        raise IndexOutOfRange(f"edge endpoint {bad} outside [0, {n})")
    if not directed:
        if types is None:
            edges = symmetric_closure(edges)
        else:
            both = np.concatenate(
                [np.c_[edges, types], np.c_[edges[:, ::-1], types]], axis=0
            )
            # one type per unordered pair; the first occurrence wins
            _, first = np.unique(both[:, :2], axis=0, return_index=True)
            kept = both[np.sort(first)]
            order = np.lexsort((kept[:, 1], kept[:, 0]))
            edges, types = kept[order, :2], kept[order, 2]
    if labels is not None:
        labels = np.asarray(labels, dtype=np.int64)
        if num_classes == 0 and labels.size:
            num_classes = int(labels.max()) + 1
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim == 1:
        feats = feats.reshape(n, -1)
    return Graph(n, edges, feats, labels, num_classes, types, n_types, directed)


def _read_csv_rows(path: Path) -> list[list[str]]:
    with path.open(encoding="utf-8", newline="") as f:
        return [row for row in csv.reader(f) if row and not row[0].lstrip().startswith("#")]


def _load_edge_csv(directory: Path, directed: bool) -> Graph:
    try:
        edge_rows = _read_csv_rows(directory / "edges.csv")
        feat_rows = _read_csv_rows(directory / "features.csv")
        label_path = directory / "labels.csv"
        label_rows = _read_csv_rows(label_path) if label_path.exists() else []
        edge_arr = [[int(x) for x in r] for r in edge_rows]
        feats = [[float(x) for x in r] for r in feat_rows]
        labels = [int(r[0]) for r in label_rows] or None
    except (OSError, ValueError) as exc:
        raise GraphFormatError(f"malformed edge-csv dataset in {directory}: {exc}") from exc
    n = len(feats)
    if labels is not None and len(labels) != n:
        raise GraphFormatError("labels.csv and features.csv row counts differ")
    typed = any(len(r) == 3 for r in edge_arr)
    arr = np.asarray(edge_arr, dtype=np.int64).reshape(-1, 3 if typed else 2)
    types = arr[:, 2] if typed else None
    n_types = int(types.max()) + 1 if typed and len(types) else 1
    return _assemble(n, arr[:, :2], types, n_types, feats, labels, 0, directed)


def _load_geom_gcn(directory: Path, directed: bool) -> Graph:
    """Raw hyperlink-network layout: ``out1_node_feature_label.txt`` and
    ``out1_graph_edges.txt`` (tab separated, one header line each)."""
    feat_file = directory / "out1_node_feature_label.txt"
    edge_file = directory / "out1_graph_edges.txt"
    try:
        ids, feats, labels = [], [], []
        with feat_file.open(encoding="utf-8") as f:
            next(f)
            for line in f:
                node, feat, label = line.rstrip("\n").split("\t")
                ids.append(int(node))
                feats.append([float(x) for x in feat.split(",")])
                labels.append(int(label))
        order = np.argsort(ids)
        with edge_file.open(encoding="utf-8") as f:
            next(f)
            edges = [[int(x) for x in line.split()] for line in f if line.strip()]
    except (OSError, ValueError, StopIteration) as exc:
        raise GraphFormatError(f"malformed geom-gcn dataset in {directory}: {exc}") from exc
    feats = np.asarray(feats)[order]
    labels = np.asarray(labels)[order]
    return _assemble(len(ids), edges, None, 1, feats, labels, 0, directed)


def detect_format(path: Path) -> str:
    path = Path(path)
    if path.is_file():
        return "graph-json"
    if (path / "graph.json").exists():
        return "graph-json"
    if (path / "edges.csv").exists():
        return "edge-csv"
    if (path / "out1_graph_edges.txt").exists():
        return "geom-gcn"
    raise GraphFormatError(f"no recognised graph files under {path}")


def load_graph(path, format: str | None = None, directed: bool = False) -> Graph:
    """Read a graph from ``graph-json`` (file or directory holding
    ``graph.json``), ``edge-csv`` or ``geom-gcn`` layout.

    Undirected inputs are symmetric-closed; node order follows the file.
    ``directed`` applies to the csv and geom-gcn layouts, which carry no
    flag of their own.
    """
    path = Path(path)
    fmt = format or detect_format(path)
    if fmt == "graph-json":
        file = path / "graph.json" if path.is_dir() else path
        try:
            obj = json.loads(file.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise GraphFormatError(f"cannot parse {file}: {exc}") from exc
        if not isinstance(obj, dict):
            raise GraphFormatError(f"{file}: top level must be an object")
        return graph_from_json_dict(obj)
    if fmt == "edge-csv":
        return _load_edge_csv(path, directed)
    if fmt == "geom-gcn":
        return _load_geom_gcn(path, directed)
    raise GraphFormatError(f"unknown graph format {fmt!r}")


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_graph(graph: Graph, path, format: str = "graph-json") -> None:
    path = Path(path)
    if format == "graph-json":
        file = path / "graph.json" if path.suffix != ".json" else path
        atomic_write_text(file, json.dumps(graph.to_json_dict(), allow_nan=False))
    elif format == "edge-csv":
        path.mkdir(parents=True, exist_ok=True)
        if graph.edge_types is not None:
            rows = [f"{u},{v},{t}" for (u, v), t in zip(graph.edges, graph.edge_types)]
        else:
            rows = [f"{u},{v}" for u, v in graph.edges]
        atomic_write_text(path / "edges.csv", "\n".join(rows) + "\n")
        atomic_write_text(
            path / "features.csv",
            "\n".join(",".join(repr(float(x)) for x in row) for row in graph.node_features) + "\n",
        )
        if graph.labels is not None:
            atomic_write_text(path / "labels.csv", "\n".join(str(int(x)) for x in graph.labels) + "\n")
    else:
        raise GraphFormatError(f"unknown graph format {format!r}")


# ---------------------------------------------------------------------------
# splits


@dataclass(frozen=True, eq=False)
class Split:
    train_mask: np.ndarray
    val_mask: np.ndarray
    test_mask: np.ndarray
    seed: int = 0

    def sizes(self) -> tuple[int, int, int]:
        return int(self.train_mask.sum()), int(self.val_mask.sum()), int(self.test_mask.sum())


def split_sizes(n: int, ratios: tuple[float, float, float]) -> tuple[int, int, int]:
    """Floor every share, then hand leftovers to train first, then val."""
    counts = [int(np.floor(r * n + 1e-9)) for r in ratios]
    left = n - sum(counts)
    for i in (0, 1, 2):
        if left <= 0:
            break
        counts[i] += 1
        left -= 1
    return counts[0], counts[1], counts[2]


def make_split(graph: Graph, ratios=(0.6, 0.2, 0.2), seed: int = 0) -> Split:
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) <= 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three positive numbers summing to 1, got {ratios}")
    labeled = np.flatnonzero(graph.labeled_mask)
    n_train, n_val, _ = split_sizes(len(labeled), ratios)
    order = np.random.default_rng(seed).permutation(labeled)
    masks = []
    for part in (order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:]):
        m = np.zeros(graph.num_nodes, dtype=bool)
        m[part] = True
        m.setflags(write=False)
        masks.append(m)
    return Split(*masks, seed=seed)


def load_split(path, num_nodes: int) -> Split:
    """Read fixed masks from a JSON file ``{"train": [...], "val": [...], "test": [...]}``
    holding either node indices or full boolean vectors."""
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    masks = []
    for key in ("train", "val", "test"):
        raw = np.asarray(obj[key])
        if raw.dtype == bool:
            if len(raw) != num_nodes:
                raise ValueError(f"{key} mask has {len(raw)} entries, expected {num_nodes}")
            m = raw.copy()
        else:
            m = np.zeros(num_nodes, dtype=bool)
            m[raw.astype(np.int64)] = True
        masks.append(m)
    if (masks[0] & masks[1]).any() or (masks[0] & masks[2]).any() or (masks[1] & masks[2]).any():
        raise ValueError("split masks overlap")
    return Split(*masks, seed=int(obj.get("seed", -1)))


# ---------------------------------------------------------------------------
# synthetic graphs


@dataclass(frozen=True)
class SyntheticSpec:
    num_nodes: int
    num_classes: int
    p_in: float
    p_out: float
    feature_mode: str = "one-hot-label"  # or "gaussian"
    sigma: float = 0.5
    seed: int = 0
    feature_dim: int | None = None

    def __post_init__(self):
        if not (0.0 <= self.p_in <= 1.0 and 0.0 <= self.p_out <= 1.0):
            raise ValueError("edge probabilities must lie in [0, 1]")
        if self.num_nodes < 1 or self.num_classes < 1:
            raise ValueError("num_nodes and num_classes must be positive")
        if self.feature_mode not in ("one-hot-label", "gaussian"):
            raise ValueError(f"unknown feature_mode {self.feature_mode!r}")


def planted_partition(spec: SyntheticSpec) -> Graph:
    """Sample an undirected planted-partition graph.

    Classes are assigned round-robin (sizes differ by at most one). Each
    unordered pair is an edge with probability ``p_in`` inside a class and
    ``p_out`` across. Gaussian features are the one-hot class centroid
    (padded to ``feature_dim``) plus isotropic noise of scale ``sigma``.
    """
    rng = np.random.default_rng(spec.seed)
    n, C = spec.num_nodes, spec.num_classes
    labels = np.arange(n) % C
    iu, ju = np.triu_indices(n, k=1)
    same = labels[iu] == labels[ju]
    prob = np.where(same, spec.p_in, spec.p_out)
    keep = rng.random(len(iu)) < prob
    edges = symmetric_closure(np.c_[iu[keep], ju[keep]])
    dim = spec.feature_dim or C
    centroids = np.eye(C, dim)
    if spec.feature_mode == "one-hot-label":
        feats = centroids[labels]
    else:
        feats = centroids[labels] + spec.sigma * rng.standard_normal((n, dim))
    return Graph(n, edges, feats, labels, C, directed=False)
