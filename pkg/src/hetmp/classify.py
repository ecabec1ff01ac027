"""Full-batch node classification with the scaled message-passing layers."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from . import autodiff as ad
from .graph import Graph, Split, make_split
from .layers import LayerSpec, MPGraph, init_layer_params, layer_forward
from .optim import AdamW

log = logging.getLogger(__name__)

METRICS = ("accuracy", "roc_auc")


class DivergenceError(FloatingPointError):
    def __init__(self, epoch: int, detail: str = ""):
        super().__init__(f"training diverged at epoch {epoch}" + (f": {detail}" if detail else ""))
        self.epoch = epoch


@dataclass(frozen=True)
class ModelSpec:
    family: str
    mode: str
    in_dim: int
    num_classes: int
    hidden_dim: int = 128
    depth: int = 2
    dropout: float = 0.2
    share_channel_params: bool = False
    detach_scaling: bool = False

    @property
    def layers(self) -> list[LayerSpec]:
        """Stacked layers; the last one maps to class logits."""
        if self.depth < 1:
            raise ValueError("depth must be at least 1")
        dims = [self.in_dim] + [self.hidden_dim] * (self.depth - 1) + [self.num_classes]
        return [
            LayerSpec(
                family=self.family,
                in_dim=a,
                out_dim=b,
                gamma=self.mode,
                share_channel_params=self.share_channel_params,
                detach_scaling=self.detach_scaling,
            )
            for a, b in zip(dims[:-1], dims[1:])
        ]


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    max_epochs: int = 1000
    patience: int = 100
    seed: int = 0
    weight_decay: float = 0.01
    eval_metric: str = "accuracy"

    def __post_init__(self):
        if self.max_epochs <= 0:
            raise ValueError("max_epochs must be positive")
        if not 0 < self.patience <= self.max_epochs:
            raise ValueError("patience must lie in (0, max_epochs]")
        if self.eval_metric not in METRICS:
            raise ValueError(f"eval_metric must be one of {METRICS}")


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    test_metric: float
    val_metric: float
    best_epoch: int
    epochs_run: int
    val_history: list[float] = field(default_factory=list)
    loss_history: list[float] = field(default_factory=list)


@dataclass
class RunReport:
    family: str
    mode: str
    seeds: list[int]
    per_seed: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.per_seed))

    @property
    def std(self) -> float:
        return float(np.std(self.per_seed))

    def to_json_dict(self) -> dict:
        return {
            "family": self.family,
            "mode": self.mode,
            "seeds": list(self.seeds),
            "per_seed": list(self.per_seed),
            "mean": self.mean,
            "std": self.std,
        }


def init_model_params(model: ModelSpec, rng: np.random.Generator) -> dict[str, np.ndarray]:
    params: dict[str, np.ndarray] = {}
    for i, spec in enumerate(model.layers):
        params.update(init_layer_params(spec, rng, prefix=f"l{i}."))
    return params


def forward(model: ModelSpec, params: dict, x, g: MPGraph, train: bool = False,
            rng: np.random.Generator | None = None) -> ad.Tensor:
    """Logits for every node. ``params`` holds tape tensors."""
    tape = next(iter(params.values())).tape
    h = x if isinstance(x, ad.Tensor) else tape.constant(x)
    layers = model.layers
    for i, spec in enumerate(layers):
        h = ad.dropout(h, model.dropout, rng, train)
        h = layer_forward(spec, params, h, g, prefix=f"l{i}.")
        if i < len(layers) - 1:
            h = ad.relu(h)
    return h


def predict(model: ModelSpec, params: dict[str, np.ndarray], graph: Graph,
            g: MPGraph | None = None) -> np.ndarray:
    tape = ad.Tape()
    out = forward(model, tape.params_from(params), graph.node_features, g or MPGraph.from_graph(graph))
    tape.release()
    return out.data


def roc_auc(scores, labels) -> float:
    """Area under the ROC curve from the Mann-Whitney rank statistic."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_auc needs both positive and negative examples")
    ranks = stats.rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def metric_from_logits(logits: np.ndarray, labels: np.ndarray, mask: np.ndarray, metric: str) -> float:
    idx = np.flatnonzero(mask)
    if len(idx) == 0:
        raise ValueError("evaluation mask is empty")
    if metric == "accuracy":
        return float(np.mean(logits[idx].argmax(axis=1) == labels[idx]))
    if metric == "roc_auc":
        if logits.shape[1] != 2:
            raise ValueError(f"roc_auc needs exactly 2 classes, got {logits.shape[1]}")
        # log-odds of class 1, a monotone map of its softmax probability
        return roc_auc(logits[idx, 1] - logits[idx, 0], labels[idx] == 1)
    raise ValueError(f"unknown metric {metric!r}")


def evaluate(params, model: ModelSpec, graph: Graph, mask, metric: str = "accuracy",
             g: MPGraph | None = None) -> float:
    return metric_from_logits(predict(model, params, graph, g), graph.labels, mask, metric)


def train(model: ModelSpec, graph: Graph, split: Split, cfg: TrainConfig,
          init_params: dict[str, np.ndarray] | None = None) -> TrainResult:
    """Minimise train-mask cross-entropy with AdamW and keep the checkpoint
    with the best validation metric (earliest on ties)."""
    if graph.labels is None:
        raise ValueError("training needs a labeled graph")
    g = MPGraph.from_graph(graph)
    rng_init = np.random.default_rng([cfg.seed, 0])
    rng_drop = np.random.default_rng([cfg.seed, 1])
    params = init_params if init_params is not None else init_model_params(model, rng_init)
    opt = AdamW(lr=cfg.lr, weight_decay=cfg.weight_decay)
    y = graph.labels
    x = graph.node_features

    def score(p):
        logits = predict(model, p, graph, g)
        return (metric_from_logits(logits, y, split.val_mask, cfg.eval_metric),
                metric_from_logits(logits, y, split.test_mask, cfg.eval_metric))

    try:
        best_val, best_test = score(params)
    except ad.NonFiniteError as exc:
        raise DivergenceError(0, str(exc)) from exc
    best_params, best_epoch = params, 0
    val_hist, loss_hist = [best_val], []
    epoch = 0
    for epoch in range(1, cfg.max_epochs + 1):
        tape = ad.Tape()
        P = tape.params_from(params)
        try:
            logits = forward(model, P, x, g, train=True, rng=rng_drop)
            loss = ad.cross_entropy(logits, y, split.train_mask)
        except ad.NonFiniteError as exc:
            raise DivergenceError(epoch, str(exc)) from exc
        if not np.isfinite(loss.data):
            raise DivergenceError(epoch, "non-finite loss")
        loss_hist.append(float(loss.data))
        grads = tape.grad(loss)
        tape.release()
        params = opt.step(params, grads)
        try:
            val, test = score(params)
        except ad.NonFiniteError as exc:
            raise DivergenceError(epoch, str(exc)) from exc
        val_hist.append(val)
        if val > best_val:
            best_val, best_test, best_params, best_epoch = val, test, params, epoch
        elif epoch - best_epoch >= cfg.patience:
            break
    return TrainResult(best_params, best_test, best_val, best_epoch, epoch, val_hist, loss_hist)


@dataclass
class BenchmarkResult:
    dataset: str
    family: str
    reports: dict[str, RunReport]
    h_ei: float | None = None

    def paired_differences(self, base: str = "orig") -> dict[str, list[float]]:
        if base not in self.reports:
            return {}
        ref = np.asarray(self.reports[base].per_seed)
        return {
            m: list(np.asarray(r.per_seed) - ref)
            for m, r in self.reports.items()
            if m != base
        }

    def paired_ttests(self, base: str = "orig") -> dict[str, float]:
        """Two-sided paired t-test p-values of each mode against ``base``."""
        out = {}
        if base not in self.reports:
            return out
        ref = np.asarray(self.reports[base].per_seed)
        for m, r in self.reports.items():
            if m == base:
                continue
            diff = np.asarray(r.per_seed) - ref
            if np.allclose(diff, diff[0]):
                out[m] = 1.0 if diff[0] == 0 else 0.0
            else:
                out[m] = float(stats.ttest_rel(r.per_seed, ref).pvalue)
        return out

    def to_json_dict(self) -> dict:
        diffs = self.paired_differences()
        return {
            "dataset": self.dataset,
            "family": self.family,
            "h_ei": self.h_ei,
            "modes": {m: r.to_json_dict() for m, r in self.reports.items()},
            "paired_differences": diffs,
            "delta_mean": {m: float(np.mean(d)) for m, d in diffs.items()},
            "delta_std": {m: float(np.std(d)) for m, d in diffs.items()},
            "paired_ttest_p": self.paired_ttests(),
        }


def benchmark(graph: Graph, family: str, modes, seeds, cfg: TrainConfig | None = None,
              hidden_dim: int = 128, depth: int = 2, dropout: float = 0.2,
              share_channel_params: bool = False, ratios=(0.6, 0.2, 0.2),
              dataset: str = "graph", splits: list[Split] | None = None,
              h_ei: float | None = None) -> BenchmarkResult:
    """Train every (mode, seed) pair; seed ``s`` fixes both the split and the
    initialisation, so modes are paired by seed."""
    seeds = [int(s) for s in seeds]
    if len(seeds) < 2:
        raise ValueError("benchmark needs at least two seeds")
    if len(set(seeds)) != len(seeds):
        raise ValueError("benchmark seeds must be distinct")
    cfg = cfg or TrainConfig()
    reports = {}
    for mode in modes:
        model = ModelSpec(family, mode, graph.node_features.shape[1], graph.num_classes,
                          hidden_dim, depth, dropout, share_channel_params)
        scores = []
        for i, seed in enumerate(seeds):
            split = splits[i % len(splits)] if splits else make_split(graph, ratios, seed)
            res = train(model, graph, split, TrainConfig(**{**asdict(cfg), "seed": seed}))
            log.info("%s/%s seed=%d test=%.4f epoch=%d", family, mode, seed, res.test_metric, res.best_epoch)
            scores.append(res.test_metric)
        reports[mode] = RunReport(family, mode, seeds, scores)
    return BenchmarkResult(dataset, family, reports, h_ei)
