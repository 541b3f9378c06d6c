"""Experiment orchestration: sweeps, metrics, transfer runs, WD traces and reports."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from . import gnn, otax, pruner
from .graphio import Graph, SbmConfig, generate_sbm, load_planetoid_dir

log = logging.getLogger(__name__)

SUMMARY_FORMAT = "glt-summary/1"
METRIC_FIELDS = ("graph_sparsity", "weight_sparsity", "val_acc", "test_acc", "macs", "wall_ms")
CSV_COLUMNS = ("method", "seed", "round") + METRIC_FIELDS

DatasetSpec = Union[str, Path, SbmConfig]


# ---------------------------------------------------------------- datasets


def load_dataset(spec: DatasetSpec, seed: int | None = None) -> Graph:
    """A planetoid-style directory, or an SBM whose seed is offset by ``seed``."""
    if isinstance(spec, SbmConfig):
        if seed is not None:
            spec = replace(spec, seed=spec.seed + seed)
        return generate_sbm(spec)
    return load_planetoid_dir(spec)


def describe_dataset(spec: DatasetSpec) -> dict:
    if isinstance(spec, SbmConfig):
        d = asdict(spec)
        d["blocks"] = list(d["blocks"])
        return {"kind": "sbm", **d}
    return {"kind": "planetoid", "path": str(spec)}


def model_dims(graph: Graph, hidden: int, layers: int = 2, classes: int | None = None) -> tuple[int, ...]:
    if layers < 1:
        raise ValueError("need at least one layer")
    return (graph.f,) + (hidden,) * (layers - 1) + (classes or graph.c,)


# ---------------------------------------------------------------- metrics


@dataclass
class MetricsRecord:
    round: int
    graph_sparsity: float
    weight_sparsity: float
    val_acc: float
    test_acc: float
    macs: int
    wall_ms: float

    def __post_init__(self):
        for name in ("graph_sparsity", "weight_sparsity"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} out of [0, 1]")
        for name in ("val_acc", "test_acc"):
            v = getattr(self, name)
            if not (math.isnan(v) or 0.0 <= v <= 1.0):
                raise ValueError(f"{name} out of [0, 1]")


def sparsity_metrics(ticket: pruner.TicketState, graph: Graph | None = None, params=None) -> tuple[float, float]:
    """``(1 - |m_g|_0 / |A|_0, 1 - |m_theta|_0 / |Theta|_0)`` counted over frozen entries."""
    if graph is not None and ticket.edge_mask.frozen.size != graph.num_edges:
        raise ValueError("edge mask does not match the graph")
    if params is not None:
        shapes = [w.shape for w in params.weights]
        if shapes != [f.shape for f in ticket.weight_mask.frozen]:
            raise ValueError("weight mask does not match the parameters")
    return pruner.graph_sparsity(ticket.edge_mask), pruner.weight_sparsity(ticket.weight_mask)


def mac_count(graph: Graph, ticket: pruner.TicketState, dims: Sequence[int] | None = None) -> int:
    """Multiply-accumulates of one inference pass with pruned entries skipped.

    Each layer computes ``X W`` densely over the surviving weights
    (``N * nnz(m_l)``) and then aggregates with the masked adjacency
    (``nnz(A) * width``), where ``nnz(A) = 2 * edges + N`` self-loops.
    """
    frozen = ticket.weight_mask.frozen
    if dims is not None:
        want = [(a, b) for a, b in zip(dims[:-1], dims[1:])]
        if want != [f.shape for f in frozen]:
            raise ValueError(f"dims {tuple(dims)} do not match mask shapes {[f.shape for f in frozen]}")
    if ticket.edge_mask.frozen.size != graph.num_edges:
        raise ValueError("edge mask does not match the graph")
    nnz_a = 2 * int((~ticket.edge_mask.frozen).sum()) + graph.n
    total = 0
    for f in frozen:
        total += graph.n * int((~f).sum()) + nnz_a * f.shape[1]
    return total


def metrics_from_history(ticket: pruner.TicketState) -> list[MetricsRecord]:
    return [MetricsRecord(**{k: rec[k] for k in ("round",) + METRIC_FIELDS}) for rec in ticket.history]


# ---------------------------------------------------------------- sweeps


@dataclass
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=SbmConfig)
    methods: tuple[str, ...] = ("ours",)
    prune: pruner.PruneConfig = field(default_factory=pruner.PruneConfig)
    seeds: tuple[int, ...] = (0,)
    out_dir: Path = Path("out")
    layers: int = 2
    workers: int = 1
    save_tickets: bool = True

    def __post_init__(self):
        if isinstance(self.methods, str):
            self.methods = (self.methods,)
        self.methods = tuple(self.methods)
        self.seeds = tuple(int(s) for s in self.seeds)
        self.out_dir = Path(self.out_dir)
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        if not self.methods:
            raise ValueError("methods must be non-empty")
        for m in self.methods:
            if m not in pruner.METHODS:
                raise ValueError(f"unknown method {m!r}; expected one of {pruner.METHODS}")
        if len(set(self.seeds)) != len(self.seeds) or len(set(self.methods)) != len(self.methods):
            raise ValueError("seeds and methods must not repeat")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")


@dataclass
class RunResult:
    method: str
    seed: int
    records: list[MetricsRecord]
    final: dict | None
    tickets: dict[int, str]  # round -> archive text
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


def run_single(
    graph: Graph, method: str, cfg: pruner.PruneConfig, seed: int, layers: int = 2, keep_tickets: bool = True
) -> RunResult:
    """One ``run_iterative`` with weights initialized from ``seed``.

    Every method sees the same initial weights for a given seed, so round 0
    (the dense model) matches across methods.
    """
    cfg = replace(cfg, seed=seed)
    params = gnn.GcnParams.init(model_dims(graph, cfg.hidden, layers), seed)
    tickets: dict[int, str] = {}

    def on_round(t: pruner.TicketState):
        rec = t.history[-1]
        rec["macs"] = mac_count(graph, t)
        if keep_tickets:
            tickets[t.round] = pruner.dumps_ticket(t)

    try:
        ticket, fit = pruner.run_iterative(graph, params, cfg, method, on_round=on_round)
    except pruner.RoundFailure as exc:
        log.error("%s seed %d: %s", method, seed, exc)
        return RunResult(method, seed, metrics_from_history(exc.ticket), None, tickets, str(exc))
    final = {
        "round": ticket.round,
        "val_acc": fit.val_acc,
        "test_acc": fit.test_acc,
        "best_epoch": fit.best_epoch,
        "fallbacks": ticket.fallbacks,
    }
    return RunResult(method, seed, metrics_from_history(ticket), final, tickets)


def _job(args) -> RunResult:
    dataset, method, cfg, seed, layers, keep = args
    try:
        graph = load_dataset(dataset, seed)
        return run_single(graph, method, cfg, seed, layers, keep)
    except Exception as exc:  # recorded per run, the sweep keeps going
        log.error("%s seed %d crashed:\n%s", method, seed, traceback.format_exc())
        return RunResult(method, seed, [], None, {}, f"{type(exc).__name__}: {exc}")


def _mean_std(xs: Sequence[float]) -> tuple[float, float]:
    # fsum is exactly rounded, so the result does not depend on input order
    n = len(xs)
    mean = math.fsum(xs) / n
    return mean, math.sqrt(math.fsum((x - mean) ** 2 for x in xs) / n)


def aggregate(rows: Sequence[dict]) -> list[dict]:
    """Mean and population std of every metric per ``(method, round)``."""
    groups: dict[tuple[str, int], list[dict]] = {}
    for r in rows:
        groups.setdefault((r["method"], int(r["round"])), []).append(r)
    out = []
    for (method, rnd) in sorted(groups):
        grp = groups[(method, rnd)]
        agg = {"method": method, "round": rnd, "n": len(grp)}
        for name in METRIC_FIELDS:
            agg[f"{name}_mean"], agg[f"{name}_std"] = _mean_std([float(r[name]) for r in grp])
        out.append(agg)
    return out


def _row(method: str, seed: int, rec: MetricsRecord) -> dict:
    return {"method": method, "seed": seed, **asdict(rec)}


def write_rows_csv(rows: Sequence[dict], path, columns: Sequence[str] | None = None) -> None:
    """CSV with floats written by ``repr`` so they read back bit-for-bit."""
    columns = list(columns or (rows[0].keys() if rows else ()))
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def write_metrics_csv(rows: Sequence[dict], path) -> None:
    write_rows_csv(rows, path, CSV_COLUMNS)


def read_metrics_csv(path) -> list[dict]:
    rows = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            rows.append(
                {
                    "method": r["method"],
                    "seed": int(r["seed"]),
                    "round": int(r["round"]),
                    "macs": int(r["macs"]),
                    **{k: float(r[k]) for k in METRIC_FIELDS if k != "macs"},
                }
            )
    return rows


def ticket_path(out_dir: Path, method: str, seed: int, rnd: int) -> Path:
    return Path(out_dir) / "tickets" / f"{method}-s{seed}" / f"round{rnd:03d}.glt"


def run_experiment(cfg: ExperimentConfig) -> dict:
    """Every ``method x seed`` combination, written under ``cfg.out_dir``.

    Outputs: ``metrics.csv`` (one row per run and round), ``summary.json``
    (per-run records, final retrain accuracy and per-round mean/std over
    seeds), ``tickets/<method>-s<seed>/roundNNN.glt`` for every round, and
    ``ticket.glt``, the final ticket of the first successful run in
    ``methods x seeds`` order. A failed run is recorded with its error and
    whatever rounds it completed.
    """
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(cfg.dataset, m, cfg.prune, s, cfg.layers, cfg.save_tickets) for m in cfg.methods for s in cfg.seeds]
    t0 = time.perf_counter()
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_job, jobs))
    else:
        results = [_job(j) for j in jobs]

    rows, runs = [], []
    first_final = None
    for res in results:
        for rec in res.records:
            rows.append(_row(res.method, res.seed, rec))
        for rnd, text in res.tickets.items():
            p = ticket_path(out, res.method, res.seed, rnd)
            p.parent.mkdir(parents=True, exist_ok=True)
            p.write_text(text)
        if res.ok and first_final is None and res.tickets:
            first_final = res.tickets[max(res.tickets)]
        runs.append(
            {
                "method": res.method,
                "seed": res.seed,
                "status": "ok" if res.ok else "failed",
                "error": res.error,
                "final": res.final,
                "rounds": [asdict(r) for r in res.records],
            }
        )
    write_metrics_csv(rows, out / "metrics.csv")
    if first_final is not None:
        (out / "ticket.glt").write_text(first_final)
    summary = {
        "format": SUMMARY_FORMAT,
        "dataset": describe_dataset(cfg.dataset),
        "config": cfg.prune.to_dict(),
        "layers": cfg.layers,
        "methods": list(cfg.methods),
        "seeds": list(cfg.seeds),
        "runs": runs,
        "aggregate": aggregate(rows),
        "final": _final_summary(runs),
        "wall_s": round(time.perf_counter() - t0, 3),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    return summary


def _final_summary(runs: Sequence[dict]) -> list[dict]:
    out = []
    for method in sorted({r["method"] for r in runs}):
        accs = [r["final"]["test_acc"] for r in runs if r["method"] == method and r["final"]]
        if accs:
            mean, std = _mean_std(accs)
            out.append({"method": method, "n": len(accs), "test_acc_mean": mean, "test_acc_std": std})
    return out


def report(in_dir, out_path=None) -> list[dict]:
    """Pool every ``summary.json`` under ``in_dir`` into one table keyed by (method, round).

    Rows are rebuilt from the per-run records, so runs from several sweeps
    are weighted equally, and the table does not depend on the order in
    which files are found.
    """
    in_dir = Path(in_dir)
    paths = sorted(in_dir.rglob("summary.json"))
    if not paths:
        raise FileNotFoundError(f"no summary.json under {in_dir}")
    rows = []
    for p in paths:
        doc = json.loads(p.read_text())
        if doc.get("format") != SUMMARY_FORMAT:
            raise ValueError(f"{p}: not a summary file")
        for run in doc["runs"]:
            rows.extend({"method": run["method"], "seed": run["seed"], **rec} for rec in run["rounds"])
    table = aggregate(rows)
    if out_path is not None:
        cols = ["method", "round", "n"] + [f"{m}_{s}" for m in METRIC_FIELDS for s in ("mean", "std")]
        write_rows_csv(table, out_path, cols)
    return table


# ---------------------------------------------------------------- dense training


def train_dense(graph: Graph, hidden: int, epochs: int, lr: float, seed: int, layers: int = 2, mode: str = "post") -> gnn.FitResult:
    params = gnn.GcnParams.init(model_dims(graph, hidden, layers), seed)
    return gnn.fit(graph, params.weights, None, np.ones(graph.num_edges), epochs, lr, mode=mode)


# ---------------------------------------------------------------- WD trace


def run_wd_trace(
    graph: Graph,
    epochs: int = 100,
    lr: float = 1e-2,
    seed: int = 0,
    hidden: int = 16,
    ot_cfg: otax.SinkhornConfig | None = None,
    mode: str = "post",
    out_path=None,
) -> list[dict]:
    """Dense training on L0 alone, logging L0 and the summed class-vs-rest WD per epoch.

    Returns ``epochs + 1`` rows; row 0 is the untrained model.
    """
    ot_cfg = ot_cfg or otax.SinkhornConfig()
    ws = gnn.GcnParams.init(model_dims(graph, hidden), seed).weights
    edges = np.ones(graph.num_edges)
    rows = []
    for epoch in range(epochs + 1):
        ev = gnn.evaluate(graph, ws, None, edges, mode=mode, wrt=("w",))
        wd = -float(otax.aux_loss_l1(ev.z, ot_cfg).value)
        rows.append({"epoch": epoch, "l0": ev.l0, "wd_sum": wd, "train_acc": gnn.accuracy(ev.z, graph, graph.train)})
        if epoch < epochs:
            ws = [w - lr * ev.grads[f"w{k}"] for k, w in enumerate(ws)]
    if out_path is not None:
        write_rows_csv(rows, out_path)
    return rows


def pearson(x, y) -> float:
    x, y = np.asarray(x, float), np.asarray(y, float)
    return float(np.corrcoef(x, y)[0, 1])


# ---------------------------------------------------------------- transfer

TRANSFER_INITS = ("post-trained", "re-initialized", "random-init-glt", "dense-post-trained", "dense-random")
TRANSFER_HEADS = ("replace-last", "add-layer")


@dataclass
class TransferConfig:
    source: DatasetSpec = field(default_factory=SbmConfig)
    target: DatasetSpec = field(default_factory=lambda: SbmConfig(blocks=(150, 150), seed=1000))
    method: str = "ours"
    prune: pruner.PruneConfig = field(default_factory=pruner.PruneConfig)
    layers: int = 3
    epochs: int = 200
    lr: float = 1e-2
    seed: int = 0
    target_hidden: int | None = None

    def __post_init__(self):
        if self.method not in pruner.METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.layers < 2:
            raise ValueError("transfer needs at least two layers")
        if self.target_hidden is not None and self.target_hidden != self.prune.hidden:
            raise ValueError(
                f"incompatible hidden dims: source {self.prune.hidden}, target {self.target_hidden}"
            )


@dataclass
class TransferModel:
    weights: list[np.ndarray]
    masks: list[np.ndarray]


@dataclass
class TransferReport:
    head: str
    source: dict
    curves: dict[str, list[dict]]
    final: dict[str, float]
    models: dict[str, TransferModel] = field(default_factory=dict, repr=False)


def build_transfer_model(
    init: str,
    head: str,
    glt_masks: Sequence[np.ndarray],
    theta0: Sequence[np.ndarray],
    glt_trained: Sequence[np.ndarray],
    dense_trained: Sequence[np.ndarray],
    random_weights: Sequence[np.ndarray],
    head_weight: np.ndarray,
) -> TransferModel:
    """Source layers for one of the five starting points, with the target head attached.

    ``replace-last`` drops the source output layer; ``add-layer`` keeps it
    and stacks one more graph-convolution layer on top. The head is dense
    and unmasked.
    """
    if init not in TRANSFER_INITS:
        raise ValueError(f"unknown transfer init {init!r}")
    if head not in TRANSFER_HEADS:
        raise ValueError(f"unknown transfer head {head!r}")
    weights = {
        "post-trained": glt_trained,
        "re-initialized": theta0,
        "random-init-glt": random_weights,
        "dense-post-trained": dense_trained,
        "dense-random": random_weights,
    }[init]
    if init.startswith("dense"):
        masks = [np.ones_like(w) for w in weights]
    else:
        masks = list(glt_masks)
    weights = [np.array(w, dtype=np.float64) for w in weights]
    masks = [np.array(m, dtype=np.float64) for m in masks]
    if head == "replace-last":
        weights, masks = weights[:-1], masks[:-1]
    if weights[-1].shape[1] != head_weight.shape[0]:
        raise ValueError(f"head expects input width {head_weight.shape[0]}, model gives {weights[-1].shape[1]}")
    weights.append(np.array(head_weight, dtype=np.float64))
    masks.append(np.ones_like(head_weight))
    return TransferModel(weights, masks)


def run_transfer(cfg: TransferConfig, head: str = "replace-last", inits: Sequence[str] = TRANSFER_INITS) -> TransferReport:
    """Find a ticket on the source graph, then fine-tune five starting points on the target.

    Only the weight masks and weights move across; the target graph is
    used unpruned. Every line trains on L0 for ``cfg.epochs`` with all
    layers trainable and reports test accuracy at the best validation epoch.
    """
    if head not in TRANSFER_HEADS:
        raise ValueError(f"unknown transfer head {head!r}")
    src = load_dataset(cfg.source)
    tgt = load_dataset(cfg.target)
    if src.f != tgt.f:
        raise ValueError(f"feature widths differ: source {src.f}, target {tgt.f}")
    pcfg = replace(cfg.prune, seed=cfg.seed)
    dims = model_dims(src, pcfg.hidden, cfg.layers)
    params = gnn.GcnParams.init(dims, cfg.seed)
    ticket, glt_fit = pruner.run_iterative(src, params, pcfg, cfg.method)
    _, wmasks = pruner.binary_masks(ticket)
    dense_fit = gnn.fit(
        src, list(params.theta0), None, np.ones(src.num_edges), pcfg.retrain_epochs, pcfg.eta2, mode=pcfg.adjacency_mode
    )
    rand = gnn.GcnParams.init(dims, int(np.random.default_rng([cfg.seed, 11]).integers(2**31))).weights
    head_in = dims[-2] if head == "replace-last" else dims[-1]
    head_w = gnn.GcnParams.init((head_in, tgt.c), int(np.random.default_rng([cfg.seed, 12]).integers(2**31))).weights[0]

    curves, final, models = {}, {}, {}
    edges = np.ones(tgt.num_edges)
    for init in inits:
        model = build_transfer_model(
            init, head, wmasks, params.theta0, glt_fit.best_weights, dense_fit.best_weights, rand, head_w
        )
        fit = gnn.fit(tgt, model.weights, model.masks, edges, cfg.epochs, cfg.lr, mode=pcfg.adjacency_mode)
        curves[init] = fit.history
        final[init] = fit.test_acc
        models[init] = model
    gs, ws = sparsity_metrics(ticket)
    source = {
        "rounds": ticket.round,
        "graph_sparsity": gs,
        "weight_sparsity": ws,
        "glt_test_acc": glt_fit.test_acc,
        "dense_test_acc": dense_fit.test_acc,
    }
    return TransferReport(head, source, curves, final, models)


def write_transfer(rep: TransferReport, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = [{"head": rep.head, "init": init, **h} for init, hist in rep.curves.items() for h in hist]
    write_rows_csv(rows, out / "transfer.csv", ("head", "init", "epoch", "loss", "train_acc", "val_acc", "test_acc"))
    doc = {"head": rep.head, "source": rep.source, "final_test_acc": rep.final}
    (out / "transfer.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
