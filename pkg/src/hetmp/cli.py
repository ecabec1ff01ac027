"""Command-line entry point.

Exit codes: 0 on success, 2 on usage errors, 1 on runtime errors. A
runtime error prints one JSON line ``{"error": <type>, "message": <text>}``
to stderr. Every command that writes an output file also writes the
resolved arguments to ``<output>.config.json``; ``run --config FILE``
replays them.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .classify import ModelSpec, TrainConfig, benchmark, train
from .flow import (
    GENERATION_MODES,
    FlowConfig,
    generate,
    graphs_to_json,
    homophily_of_generated,
    init_flow,
    load_model,
    save_model,
    toy_graph_pool,
    train_flow,
)
from .graph import (
    Graph,
    SyntheticSpec,
    atomic_write_text,
    graph_from_json_dict,
    load_graph,
    load_split,
    make_split,
    planted_partition,
)
from .homophily import class_insensitive_edge_homophily, homophily_report
from .layers import FAMILIES

log = logging.getLogger("hetmp")

COMMANDS = ("metrics", "train", "benchmark", "synth", "flow-train", "flow-generate", "plotdata")
MODES = ("orig", "hom", "het", "mix")
CLASSIFY_FAMILIES = tuple(f for f in FAMILIES if f != "mixmp-gcn")
METRIC_ALIASES = {"acc": "accuracy", "auc": "roc_auc", "accuracy": "accuracy", "roc_auc": "roc_auc"}
DELTA_HEADER = ["dataset", "H_ei", "family", "mode", "delta_mean", "delta_std"]


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# deterministic JSON


def fmt_float(x: float) -> str:
    return "%.17g" % x


def dumps(obj, indent: int = 2, _level: int = 0) -> str:
    """JSON text with every float at 17 significant digits; non-finite
    floats become null."""
    pad = " " * (indent * (_level + 1))
    end = " " * (indent * _level)
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if obj is None:
        return "null"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return fmt_float(float(obj)) if math.isfinite(obj) else "null"
    if isinstance(obj, str):
        return json.dumps(obj, ensure_ascii=False)
    if isinstance(obj, np.ndarray):
        return dumps(obj.tolist(), indent, _level)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {dumps(v, indent, _level + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        if all(not isinstance(v, (dict, list, tuple, np.ndarray)) for v in obj):
            return "[" + ", ".join(dumps(v, indent, _level + 1) for v in obj) + "]"
        return "[\n" + ",\n".join(pad + dumps(v, indent, _level + 1) for v in obj) + "\n" + end + "]"
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def write_json(path, obj) -> None:
    atomic_write_text(path, dumps(obj) + "\n")


def write_config(out_path, command: str, args: argparse.Namespace) -> None:
    resolved = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "command")}
    write_json(f"{out_path}.config.json", {"command": command, "args": resolved})


# ---------------------------------------------------------------------------
# helpers


def _default_seed() -> int:
    raw = os.environ.get("HETMP_SEED")
    if raw is None or raw == "":
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"HETMP_SEED must be an integer, got {raw!r}") from None


def _csv_list(text: str, allowed: tuple[str, ...], what: str) -> list[str]:
    items = [s.strip() for s in text.split(",") if s.strip()]
    bad = [s for s in items if s not in allowed]
    if not items or bad:
        raise argparse.ArgumentTypeError(f"invalid {what} {bad or text!r}; choose from {','.join(allowed)}")
    return items


def _positive_int(text: str) -> int:
    v = int(text)
    if v <= 0:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _unit_float(text: str) -> float:
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"expected a value in [0, 1], got {text}")
    return v


def _dataset_name(path: str) -> str:
    p = Path(path)
    return p.stem if p.is_file() else p.name


def _load(args) -> Graph:
    return load_graph(args.data, args.format, args.directed)


def _emit(args, obj, command: str) -> None:
    if args.out:
        write_json(args.out, obj)
        write_config(args.out, command, args)
    else:
        sys.stdout.write(dumps(obj) + "\n")


def _load_pool(path) -> list[Graph]:
    path = Path(path)
    file = path / "graphs.json" if path.is_dir() else path
    obj = json.loads(file.read_text(encoding="utf-8"))
    items = obj["graphs"] if isinstance(obj, dict) else obj
    if not isinstance(items, list):
        raise ValueError(f"{file}: expected a list of graphs")
    return [graph_from_json_dict(g) for g in items]


# ---------------------------------------------------------------------------
# commands


def cmd_metrics(args) -> None:
    graph = _load(args)
    report = homophily_report(graph).to_json_dict()
    report["dataset"] = _dataset_name(args.data)
    report["num_nodes"] = graph.num_nodes
    report["num_edges"] = graph.num_edges
    report["directed"] = graph.directed
    _emit(args, report, "metrics")


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        lr=args.lr,
        max_epochs=args.epochs,
        patience=min(args.patience, args.epochs),
        seed=args.seed,
        weight_decay=args.weight_decay,
        eval_metric=METRIC_ALIASES[args.metric],
    )


def _run_benchmark(args, graph: Graph, family: str, modes: list[str]):
    seeds = list(range(args.seed, args.seed + args.seeds))
    splits = [load_split(args.split, graph.num_nodes)] if args.split else None
    return benchmark(
        graph, family, modes, seeds, _train_config(args),
        hidden_dim=args.hidden, depth=args.depth, dropout=args.dropout,
        share_channel_params=args.share_channel_params, dataset=_dataset_name(args.data),
        splits=splits, h_ei=class_insensitive_edge_homophily(graph),
    )


def cmd_train(args) -> None:
    graph = _load(args)
    model = ModelSpec(args.family, args.mode, graph.node_features.shape[1], graph.num_classes,
                      args.hidden, args.depth, args.dropout, args.share_channel_params)
    fixed = load_split(args.split, graph.num_nodes) if args.split else None
    cfg = _train_config(args)
    seeds = list(range(args.seed, args.seed + args.seeds))
    per_seed = []
    for seed in seeds:
        split = fixed or make_split(graph, seed=seed)
        res = train(model, graph, split, replace(cfg, seed=seed))
        log.info("seed=%d test=%.4f best_epoch=%d", seed, res.test_metric, res.best_epoch)
        per_seed.append(res.test_metric)
    report = {
        "dataset": _dataset_name(args.data),
        "family": args.family,
        "mode": args.mode,
        "metric": METRIC_ALIASES[args.metric],
        "seeds": seeds,
        "per_seed": per_seed,
        "mean": float(np.mean(per_seed)),
        "std": float(np.std(per_seed)),
    }
    _emit(args, report, "train")


def cmd_benchmark(args) -> None:
    graph = _load(args)
    families = {}
    h_ei = None
    for fam in args.families:
        res = _run_benchmark(args, graph, fam, args.modes)
        h_ei = res.h_ei
        families[fam] = res.to_json_dict()
    report = {
        "kind": "benchmark",
        "dataset": _dataset_name(args.data),
        "h_ei": h_ei,
        "metric": METRIC_ALIASES[args.metric],
        "families": families,
    }
    _emit(args, report, "benchmark")


def cmd_synth(args) -> None:
    out = Path(args.out)
    if args.pool:
        graphs = toy_graph_pool(args.pool, args.n, args.classes, args.edge_types,
                                args.p_in, args.p_out, args.seed)
        write_json(out / "graphs.json", graphs_to_json(graphs))
        write_config(out / "graphs.json", "synth", args)
        return
    spec = SyntheticSpec(args.n, args.classes, args.p_in, args.p_out, args.features,
                         args.sigma, args.seed, args.dim)
    graph = planted_partition(spec)
    file = out if out.suffix == ".json" else out / "graph.json"
    write_json(file, graph.to_json_dict())
    write_config(file, "synth", args)


def cmd_flow_train(args) -> None:
    pool = _load_pool(args.data)
    if not pool:
        raise ValueError("training pool is empty")
    first = pool[0]
    config = FlowConfig(
        num_nodes=first.num_nodes,
        num_node_types=args.node_types or first.num_classes,
        num_edge_types=args.edge_types or first.num_edge_types,
        layers_atom=args.layers_atom,
        layers_bond=args.layers_bond,
        share_channel_params=args.share_channel_params,
        variance_mode=args.variance_mode,
        dequant_scale=args.dequant,
    )
    model = init_flow(config, seed=args.seed)
    res = train_flow(model, pool, args.steps, batch_size=args.batch_size, lr=args.lr, seed=args.seed)
    save_model(res.model, args.out)
    write_json(f"{args.out}.report.json", {
        "steps": args.steps,
        "num_graphs": len(pool),
        "nll_history": res.nll_history,
        "final_nll": res.nll_history[-1] if res.nll_history else None,
    })
    write_config(args.out, "flow-train", args)


def cmd_flow_generate(args) -> None:
    model = load_model(args.model)
    pool = _load_pool(args.data) if args.data else None
    graphs = generate(model, args.n, args.mode, pool, seed=args.seed)
    write_json(args.out, graphs_to_json(graphs))
    if args.hist:
        atomic_write_text(args.hist, homophily_of_generated(graphs).to_csv())
    write_config(args.out, "flow-generate", args)


def delta_rows(report: dict) -> list[list]:
    """(dataset, H_ei, family, mode, delta_mean, delta_std) per non-orig mode."""
    if report.get("kind") == "benchmark":
        dataset, h_ei = report["dataset"], report.get("h_ei")
        fams = report["families"]
    elif "modes" in report and "family" in report:
        dataset, h_ei = report.get("dataset", ""), report.get("h_ei")
        fams = {report["family"]: report}
    else:
        raise ValueError("report does not follow the benchmark schema")
    rows = []
    for fam, body in fams.items():
        if "modes" not in body:
            raise ValueError(f"family {fam!r} lacks per-mode results")
        modes = body["modes"]
        if "orig" not in modes:
            continue
        ref = np.asarray(modes["orig"]["per_seed"], dtype=np.float64)
        for mode, rec in modes.items():
            if mode == "orig":
                continue
            d = np.asarray(rec["per_seed"], dtype=np.float64) - ref
            rows.append([dataset, h_ei, fam, mode, float(d.mean()), float(d.std())])
    return rows


def cmd_plotdata(args) -> None:
    rows = []
    for path in args.reports:
        try:
            report = json.loads(Path(path).read_text(encoding="utf-8"))
            rows.extend(delta_rows(report))
        except (KeyError, TypeError) as exc:
            raise ValueError(f"{path}: report schema mismatch ({exc})") from exc
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(DELTA_HEADER)
    for r in rows:
        w.writerow([r[0], "" if r[1] is None else fmt_float(r[1]), r[2], r[3], fmt_float(r[4]), fmt_float(r[5])])
    atomic_write_text(args.out, buf.getvalue())
    if args.graphs:
        graphs = _load_pool(args.graphs)
        atomic_write_text(args.hist_out or f"{args.out}.hist.csv", homophily_of_generated(graphs).to_csv())
    write_config(args.out, "plotdata", args)


def cmd_run(args) -> None:
    obj = json.loads(Path(args.config).read_text(encoding="utf-8"))
    command = obj.get("command")
    if command not in COMMANDS:
        raise UsageError(f"config names unknown command {command!r}")
    parser = build_parser()
    # start from the subcommand's defaults, then apply the recorded values
    ns = parser.parse_args([command] + _required_stub(command))
    for k, v in obj.get("args", {}).items():
        setattr(ns, k, v)
    ns.func(ns)


_REQUIRED = {
    "metrics": ["--data", "."],
    "train": ["--data", ".", "--family", "gcn", "--mode", "orig"],
    "benchmark": ["--data", "."],
    "synth": ["--out", "."],
    "flow-train": ["--data", ".", "--out", "."],
    "flow-generate": ["--model", ".", "--out", "."],
    "plotdata": ["--reports", ".", "--out", "."],
}


def _required_stub(command: str) -> list[str]:
    return list(_REQUIRED[command])


# ---------------------------------------------------------------------------
# parser


def _add_data(p) -> None:
    p.add_argument("--data", required=True, help="graph file or dataset directory")
    p.add_argument("--format", choices=["graph-json", "edge-csv", "geom-gcn"], default=None,
                   help="input layout (detected when omitted)")
    p.add_argument("--directed", action="store_true", help="keep csv/geom-gcn edges directed")


def _add_training(p, seed: int) -> None:
    p.add_argument("--seeds", type=_positive_int, default=10, help="number of seeds (split and init)")
    p.add_argument("--seed", type=int, default=seed, help="first seed")
    p.add_argument("--hidden", type=_positive_int, default=128)
    p.add_argument("--depth", type=_positive_int, default=2)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--weight-decay", type=float, default=0.01)
    p.add_argument("--dropout", type=float, default=0.2)
    p.add_argument("--epochs", type=_positive_int, default=1000)
    p.add_argument("--patience", type=_positive_int, default=100)
    p.add_argument("--metric", choices=sorted(METRIC_ALIASES), default="acc")
    p.add_argument("--split", default=None, help="fixed split JSON (train/val/test)")
    p.add_argument("--share-channel-params", action="store_true")
    p.add_argument("--out", default=None, help="report path (stdout when omitted)")


def build_parser(seed: int = 0) -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hetmp", description="Similarity-scaled message passing lab")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("metrics", help="homophily statistics of a labeled graph")
    _add_data(p)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("train", help="train one family/mode over several seeds")
    _add_data(p)
    p.add_argument("--family", choices=CLASSIFY_FAMILIES, required=True)
    p.add_argument("--mode", choices=MODES, required=True)
    _add_training(p, seed)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("benchmark", help="paired comparison of modes per family")
    _add_data(p)
    p.add_argument("--families", type=lambda s: _csv_list(s, CLASSIFY_FAMILIES, "family"),
                   default=list(CLASSIFY_FAMILIES))
    p.add_argument("--modes", type=lambda s: _csv_list(s, MODES, "mode"), default=list(MODES))
    _add_training(p, seed)
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("synth", help="planted-partition graph, or a pool of small typed graphs")
    p.add_argument("--n", type=_positive_int, default=200, help="nodes per graph")
    p.add_argument("--classes", type=_positive_int, default=2, help="classes / node types")
    p.add_argument("--p-in", type=_unit_float, default=0.5)
    p.add_argument("--p-out", type=_unit_float, default=0.01)
    p.add_argument("--features", choices=["one-hot-label", "gaussian"], default="one-hot-label")
    p.add_argument("--sigma", type=float, default=0.5)
    p.add_argument("--dim", type=_positive_int, default=None, help="feature dimension")
    p.add_argument("--pool", type=_positive_int, default=None, help="emit this many small typed graphs")
    p.add_argument("--edge-types", type=_positive_int, default=2, help="edge types (pool only)")
    p.add_argument("--seed", type=int, default=seed)
    p.add_argument("--out", required=True, help="output directory (or .json file)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("flow-train", help="fit the coupling flow to a graph pool")
    p.add_argument("--data", required=True, help="graphs.json or a directory holding it")
    p.add_argument("--layers-atom", type=_positive_int, default=8)
    p.add_argument("--layers-bond", type=_positive_int, default=4)
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--batch-size", type=_positive_int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--variance-mode", type=int, choices=[0, 1, 2], default=1)
    p.add_argument("--dequant", type=float, default=0.6)
    p.add_argument("--node-types", type=_positive_int, default=None)
    p.add_argument("--edge-types", type=_positive_int, default=None)
    p.add_argument("--share-channel-params", action="store_true")
    p.add_argument("--seed", type=int, default=seed)
    p.add_argument("--out", required=True, help="model file")
    p.set_defaults(func=cmd_flow_train)

    p = sub.add_parser("flow-generate", help="sample graphs from a trained flow")
    p.add_argument("--model", required=True)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--mode", choices=GENERATION_MODES, default="full")
    p.add_argument("--data", default=None, help="topology pool for true_adj")
    p.add_argument("--hist", default=None, help="also write the homophily histogram CSV")
    p.add_argument("--seed", type=int, default=seed)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_flow_generate)

    p = sub.add_parser("plotdata", help="tidy CSV of accuracy deltas from reports")
    p.add_argument("--reports", nargs="+", required=True)
    p.add_argument("--graphs", default=None, help="generated graphs for a homophily histogram")
    p.add_argument("--hist-out", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plotdata)

    p = sub.add_parser("run", help="replay a resolved config file")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_run)
    return parser


def _fail_usage(parser, message: str) -> int:
    parser.print_usage(sys.stderr)
    sys.stderr.write(f"{parser.prog}: error: {message}\n")
    return 2


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        seed = _default_seed()
    except UsageError as exc:
        return _fail_usage(build_parser(), str(exc))
    parser = build_parser(seed)
    if not argv:
        parser.print_help(sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_help(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        return _fail_usage(parser, str(exc))
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit 1
        msg = " ".join(str(exc).split())
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": msg}) + "\n")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
