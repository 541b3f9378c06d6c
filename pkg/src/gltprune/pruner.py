"""Min-max mask sparsification, iterative magnitude pruning with rewinding, baselines.

Masks are scored continuously during a round and binarized at the end:
the lowest ``p%`` of the still-alive entries are frozen at 0 and every
survivor is reset to exactly 1.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import diffcore as dc
from . import gnn, otax
from .graphio import Graph

log = logging.getLogger(__name__)

METHODS = ("ours", "ugs", "ugs+wd", "random")
TICKET_FORMAT = "glt-ticket/1"


@dataclass
class EdgeMask:
    values: np.ndarray
    frozen: np.ndarray

    @classmethod
    def ones(cls, n: int, noise: float = 0.0, rng: np.random.Generator | None = None) -> "EdgeMask":
        v = np.ones(n)
        if noise > 0:
            v += (rng or np.random.default_rng()).uniform(0.0, noise, size=n)
        return cls(v, np.zeros(n, dtype=bool))

    def copy(self) -> "EdgeMask":
        return EdgeMask(self.values.copy(), self.frozen.copy())


@dataclass(frozen=True)
class PruneConfig:
    p_g: float = 5.0
    p_theta: float = 20.0
    s_g: float = 0.9
    s_theta: float = 0.99
    lam: float = 0.1
    eta1: float = 1e-2
    eta2: float = 1e-2
    alpha: float = 1e-1
    t_inner: int = 200
    retrain_epochs: int = 200
    probe_epochs: int = 50
    mask_init_noise: float = 1e-5
    seed: int = 0
    max_rounds: int | None = None
    hidden: int = 16
    adjacency_mode: str = "post"
    epsilon: float = 0.1
    sinkhorn_iters: int = 100
    sinkhorn_tol: float = 1e-6
    max_points: int = 256

    def __post_init__(self):
        for name in ("p_g", "p_theta"):
            if not 0 < getattr(self, name) < 100:
                raise ValueError(f"{name} must be in (0, 100)")
        for name in ("s_g", "s_theta"):
            if not 0 < getattr(self, name) < 1:
                raise ValueError(f"{name} must be in (0, 1)")
        if self.eta1 <= 0 or self.eta2 <= 0:
            raise ValueError("step sizes must be > 0")
        if self.alpha < 0 or self.lam < 0:
            raise ValueError("alpha and lam must be >= 0")
        if self.t_inner < 0 or self.retrain_epochs < 0 or self.probe_epochs < 0:
            raise ValueError("epoch counts must be >= 0")
        if self.adjacency_mode not in ("post", "renormalize"):
            raise ValueError(f"unknown adjacency_mode {self.adjacency_mode!r}")

    @property
    def sinkhorn(self) -> otax.SinkhornConfig:
        return otax.SinkhornConfig(self.epsilon, self.sinkhorn_iters, self.sinkhorn_tol, self.max_points, self.seed)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PruneConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown PruneConfig keys: {sorted(unknown)}")
        return cls(**d)


class RoundFailure(RuntimeError):
    """A pruning round aborted; ``ticket`` holds everything recorded before it."""

    def __init__(self, message: str, ticket: "TicketState"):
        super().__init__(message)
        self.ticket = ticket


@dataclass
class TicketState:
    edge_mask: EdgeMask
    weight_mask: gnn.WeightMask
    theta0: tuple[np.ndarray, ...]
    round: int = 0
    history: list[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    loss_log: list[list[float]] = field(default_factory=list)
    fallbacks: int = 0


# ---------------------------------------------------------------- objective


class Objective:
    """``L0 + lam * L1`` of the masked GCN on a fixed graph."""

    def __init__(self, graph: Graph, lam: float, ot_cfg: otax.SinkhornConfig | None = None, mode: str = "post"):
        self.graph = graph
        self.lam = lam
        self.ot_cfg = ot_cfg or otax.SinkhornConfig()
        self.mode = mode

    def __call__(self, weights, wmask, edge_values, wrt=("w", "m", "g")) -> gnn.Evaluation:
        return gnn.evaluate(self.graph, weights, wmask, edge_values, self.lam, self.ot_cfg, self.mode, wrt)


def objective_for(graph: Graph, cfg: PruneConfig, lam: float | None = None) -> Objective:
    return Objective(graph, cfg.lam if lam is None else lam, cfg.sinkhorn, cfg.adjacency_mode)


# ---------------------------------------------------------------- sparsity bookkeeping


def graph_sparsity(edge_mask: EdgeMask) -> float:
    n = edge_mask.frozen.size
    return float(edge_mask.frozen.sum()) / n if n else 0.0


def weight_sparsity(weight_mask: gnn.WeightMask) -> float:
    frozen = weight_mask.flat_frozen()
    return float(frozen.sum()) / frozen.size if frozen.size else 0.0


def _check_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite gradient for {name}")


# ---------------------------------------------------------------- steps


def project_unit_interval(mask: EdgeMask) -> EdgeMask:
    """Euclidean projection onto the box, i.e. an elementwise clamp; frozen stay 0."""
    v = np.where(mask.frozen, 0.0, np.clip(mask.values, 0.0, 1.0))
    return EdgeMask(v, mask.frozen.copy())


@dataclass
class AscentStep:
    edge_mask: EdgeMask
    grad: np.ndarray  # dL/dm_g at the pre-step mask
    active: np.ndarray  # coordinates where the clamp did not bind
    base: gnn.Evaluation  # full evaluation at the pre-step mask
    prev_values: np.ndarray


def inner_ascent_step(ticket: TicketState, params: gnn.GcnParams, objective, cfg: PruneConfig) -> AscentStep:
    """Projected gradient ascent on the edge mask; frozen edges untouched."""
    em = ticket.edge_mask
    base = objective(params.weights, ticket.weight_mask.values, em.values, ("w", "m", "g"))
    grad = np.where(em.frozen, 0.0, base.grads["g"])
    _check_finite("edge mask", grad)
    raw = em.values + cfg.eta1 * grad
    stepped = project_unit_interval(EdgeMask(raw, em.frozen))
    active = (raw > 0.0) & (raw < 1.0) & ~em.frozen
    ticket.edge_mask = stepped
    return AscentStep(stepped, grad, active, base, em.values.copy())


@dataclass
class DescentStep:
    loss: float
    fell_back: bool


def outer_descent_step(
    ticket: TicketState, params: gnn.GcnParams, objective, cfg: PruneConfig, ascent: AscentStep
) -> DescentStep:
    """Descent on weight masks and weights at the advanced edge mask.

    The implicit term ``alpha * (d m_g' / d p)^T grad_g L(m_g')`` is
    ``alpha * eta1 * (d^2 L / dp dm_g) @ (active ⊙ grad_g L(m_g'))``, taken
    by a forward difference of the p-gradients along the edge-mask
    direction. If that comes out non-finite the step uses ``alpha = 0``.
    """
    wm = ticket.weight_mask
    after = objective(params.weights, wm.values, ticket.edge_mask.values, ("w", "m", "g"))
    nw = len(params.weights)
    keys = [f"w{k}" for k in range(nw)] + [f"m{k}" for k in range(nw)]
    for k in keys:
        _check_finite(k, after.grads[k])

    cross = None
    fell_back = False
    if cfg.alpha > 0:
        direction = np.where(ascent.active, after.grads["g"], 0.0)

        def grad_at(x):
            return objective(params.weights, wm.values, x, ("w", "m")).grads

        base_grads = {k: ascent.base.grads[k] for k in keys}
        try:
            cross = dc.hvp_cross(grad_at, ascent.prev_values, direction, base_grads)
        except FloatingPointError:
            fell_back = True
            ticket.fallbacks += 1
            log.warning("non-finite implicit gradient; using alpha=0 for this step")

    scale = cfg.alpha * cfg.eta1
    new_masks, new_weights = [], []
    for k in range(nw):
        gm = after.grads[f"m{k}"]
        gw = after.grads[f"w{k}"]
        if cross is not None:
            gm = gm + scale * cross[f"m{k}"]
            gw = gw + scale * cross[f"w{k}"]
        m = np.clip(wm.values[k] - cfg.eta2 * gm, 0.0, 1.0)
        new_masks.append(np.where(wm.frozen[k], 0.0, m))
        new_weights.append(params.weights[k] - cfg.eta2 * gw)
    ticket.weight_mask = gnn.WeightMask(new_masks, [f.copy() for f in wm.frozen])
    params.weights = new_weights
    return DescentStep(after.loss, fell_back)


def run_round(ticket: TicketState, graph: Graph, params: gnn.GcnParams, cfg: PruneConfig, objective=None) -> list[float]:
    """``t_inner`` alternating ascent/descent iterations; returns the loss per iteration."""
    objective = objective or objective_for(graph, cfg)
    losses = []
    for _ in range(cfg.t_inner):
        ascent = inner_ascent_step(ticket, params, objective, cfg)
        step = outer_descent_step(ticket, params, objective, cfg, ascent)
        losses.append(step.loss)
    return losses


def baseline_ugs_round(
    ticket: TicketState, graph: Graph, params: gnn.GcnParams, cfg: PruneConfig, lam: float = 0.0, objective=None
) -> list[float]:
    """Joint gradient descent on weights, weight masks and edge mask.

    ``lam=0`` is plain UGS; ``lam>0`` is the UGS+WD ablation. Masks are
    not projected, matching the unconstrained descent of the original
    method, so untouched edges keep their initial noise ordering.
    """
    objective = objective or objective_for(graph, cfg, lam)
    losses = []
    for _ in range(cfg.t_inner):
        ev = objective(params.weights, ticket.weight_mask.values, ticket.edge_mask.values, ("w", "m", "g"))
        for name, g in ev.grads.items():
            _check_finite(name, g)
        em = ticket.edge_mask
        ticket.edge_mask = EdgeMask(np.where(em.frozen, 0.0, em.values - cfg.eta1 * ev.grads["g"]), em.frozen)
        wm = ticket.weight_mask
        ticket.weight_mask = gnn.WeightMask(
            [np.where(f, 0.0, v - cfg.eta2 * ev.grads[f"m{k}"]) for k, (v, f) in enumerate(zip(wm.values, wm.frozen))],
            wm.frozen,
        )
        params.weights = [w - cfg.eta2 * ev.grads[f"w{k}"] for k, w in enumerate(params.weights)]
        losses.append(ev.loss)
    return losses


# ---------------------------------------------------------------- pruning


def _prune_count(alive: int, p: float) -> int:
    return min(alive, math.ceil(p / 100.0 * alive - 1e-9))


def magnitude_prune(
    values: np.ndarray, frozen: np.ndarray, p: float, rng: np.random.Generator | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Freeze the lowest ``p%`` of the alive entries (ties at the cut go too).

    The count is ``ceil(p% * alive)``, so the kept fraction compounds to
    ``(1 - p/100)^r`` after ``r`` rounds. Survivors are reset to 1.

    Exception: when the cut lands on the largest alive value (typically a
    block of scores saturated at the upper bound of the box), pruning the
    whole tie block would freeze far more than requested, possibly every
    entry. Then exactly ``ceil(p% * alive)`` are pruned and the tie block is
    sampled with ``rng`` (seeded 0 by default).
    """
    if not 0 < p < 100:
        raise ValueError("p must be in (0, 100)")
    values = np.asarray(values, dtype=np.float64)
    frozen = np.asarray(frozen, dtype=bool)
    alive = np.flatnonzero(~frozen)
    if len(alive) == 0:
        raise ValueError("nothing left to prune: every entry is frozen")
    k = _prune_count(len(alive), p)
    scores = values[alive]
    threshold = np.partition(scores, k - 1)[k - 1]
    cut = scores <= threshold
    if threshold == scores.max() and cut.sum() > k:
        below = np.flatnonzero(scores < threshold)
        tied = np.flatnonzero(scores == threshold)
        rng = rng if rng is not None else np.random.default_rng(0)
        chosen = rng.choice(tied, size=k - len(below), replace=False)
        cut = np.zeros(len(alive), dtype=bool)
        cut[below] = True
        cut[chosen] = True
    new_frozen = frozen.copy()
    new_frozen[alive[cut]] = True
    return np.where(new_frozen, 0.0, 1.0), new_frozen


def baseline_random_prune(ticket: TicketState, p_g: float, p_theta: float, seed) -> TicketState:
    """Freeze uniformly random alive entries with the same per-round counts."""
    rng = np.random.default_rng(seed)

    def _rand(frozen, p):
        alive = np.flatnonzero(~frozen)
        if len(alive) == 0:
            raise ValueError("nothing left to prune: every entry is frozen")
        pick = rng.choice(alive, size=_prune_count(len(alive), p), replace=False)
        f = frozen.copy()
        f[pick] = True
        return np.where(f, 0.0, 1.0), f

    ev, ef = _rand(ticket.edge_mask.frozen, p_g)
    ticket.edge_mask = EdgeMask(ev, ef)
    wv, wf = _rand(ticket.weight_mask.flat_frozen(), p_theta)
    ticket.weight_mask.set_flat(wv, wf)
    return ticket


def prune_ticket(ticket: TicketState, cfg: PruneConfig) -> TicketState:
    rng = np.random.default_rng([cfg.seed, 3, ticket.round])
    ev, ef = magnitude_prune(ticket.edge_mask.values, ticket.edge_mask.frozen, cfg.p_g, rng)
    ticket.edge_mask = EdgeMask(ev, ef)
    wv, wf = magnitude_prune(ticket.weight_mask.flat(), ticket.weight_mask.flat_frozen(), cfg.p_theta, rng)
    ticket.weight_mask.set_flat(wv, wf)
    return ticket


def rewind(params: gnn.GcnParams) -> gnn.GcnParams:
    return params.rewind()


# ---------------------------------------------------------------- retraining


def binary_masks(ticket: TicketState) -> tuple[np.ndarray, list[np.ndarray]]:
    edge = (~ticket.edge_mask.frozen).astype(np.float64)
    weights = [(~f).astype(np.float64) for f in ticket.weight_mask.frozen]
    return edge, weights


def retrain_final(ticket: TicketState, graph: Graph, cfg: PruneConfig, epochs: int | None = None) -> gnn.FitResult:
    """Retrain from theta0 on L0 alone with the binarized masks held fixed."""
    edge, weights = binary_masks(ticket)
    return gnn.fit(
        graph,
        [t.copy() for t in ticket.theta0],
        weights,
        edge,
        cfg.retrain_epochs if epochs is None else epochs,
        cfg.eta2,
        mode=cfg.adjacency_mode,
    )


# ---------------------------------------------------------------- prune / rewind loop


def new_ticket(graph: Graph, params: gnn.GcnParams, cfg: PruneConfig) -> TicketState:
    rng = np.random.default_rng([cfg.seed, 1])
    return TicketState(
        edge_mask=EdgeMask.ones(graph.num_edges, cfg.mask_init_noise, rng),
        weight_mask=gnn.WeightMask.ones([w.shape for w in params.theta0], cfg.mask_init_noise, rng),
        theta0=params.theta0,
        config=cfg.to_dict(),
    )


def _record(ticket: TicketState, graph: Graph, cfg: PruneConfig, started: float) -> dict:
    probe = retrain_final(ticket, graph, cfg, epochs=cfg.probe_epochs)
    rec = {
        "round": ticket.round,
        "graph_sparsity": graph_sparsity(ticket.edge_mask),
        "weight_sparsity": weight_sparsity(ticket.weight_mask),
        "val_acc": probe.val_acc,
        "test_acc": probe.test_acc,
        "wall_ms": round((time.perf_counter() - started) * 1000.0, 3),
    }
    ticket.history.append(rec)
    return rec


def run_iterative(
    graph: Graph,
    params: gnn.GcnParams,
    cfg: PruneConfig,
    method: str = "ours",
    on_round: Callable[[TicketState], None] | None = None,
) -> tuple[TicketState, gnn.FitResult]:
    """Train / prune / rewind until either sparsity target is reached.

    Round 0 is the dense model. After every round the binarized ticket is
    probed with a short L0 retrain from theta0; the returned fit is the
    full-length retrain of the final ticket.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    ticket = new_ticket(graph, params, cfg)
    started = time.perf_counter()
    _record(ticket, graph, cfg, started)
    if on_round:
        on_round(ticket)
    objective = None
    if method == "ours":
        objective = objective_for(graph, cfg)
    elif method in ("ugs", "ugs+wd"):
        objective = objective_for(graph, cfg, 0.0 if method == "ugs" else cfg.lam)

    while graph_sparsity(ticket.edge_mask) < cfg.s_g and weight_sparsity(ticket.weight_mask) < cfg.s_theta:
        if cfg.max_rounds is not None and ticket.round >= cfg.max_rounds:
            break
        rewind(params)
        started = time.perf_counter()
        try:
            if method == "random":
                baseline_random_prune(ticket, cfg.p_g, cfg.p_theta, [cfg.seed, 2, ticket.round])
            else:
                if method == "ours":
                    losses = run_round(ticket, graph, params, cfg, objective)
                else:
                    losses = baseline_ugs_round(ticket, graph, params, cfg, objective=objective)
                ticket.loss_log.append(losses)
                prune_ticket(ticket, cfg)
        except (FloatingPointError, ValueError) as exc:
            raise RoundFailure(f"{method} round {ticket.round + 1} failed: {exc}", ticket) from exc
        ticket.round += 1
        rec = _record(ticket, graph, cfg, started)
        log.info("%s round %d: GS=%.4f WS=%.4f test=%.3f", method, ticket.round, rec["graph_sparsity"], rec["weight_sparsity"], rec["test_acc"])
        if on_round:
            on_round(ticket)
    rewind(params)
    return ticket, retrain_final(ticket, graph, cfg)


# ---------------------------------------------------------------- ticket archive


def _bits(a: np.ndarray) -> str:
    return "".join("1" if b else "0" for b in np.asarray(a, dtype=bool).ravel())


def _unbits(s: str, shape) -> np.ndarray:
    arr = np.frombuffer(s.encode("ascii"), dtype=np.uint8) == ord("1")
    return arr.reshape(shape).copy()


def dumps_ticket(ticket: TicketState) -> str:
    doc = {
        "format": TICKET_FORMAT,
        "round": ticket.round,
        "config": ticket.config,
        "edge_frozen": _bits(ticket.edge_mask.frozen),
        "weight_shapes": [list(f.shape) for f in ticket.weight_mask.frozen],
        "weight_frozen": [_bits(f) for f in ticket.weight_mask.frozen],
        "theta0": [t.tolist() for t in ticket.theta0],
        "history": ticket.history,
    }
    return json.dumps(doc, sort_keys=True, indent=1) + "\n"


def loads_ticket(text: str) -> TicketState:
    doc = json.loads(text)
    if doc.get("format") != TICKET_FORMAT:
        raise ValueError(f"not a ticket archive (format={doc.get('format')!r})")
    ef = _unbits(doc["edge_frozen"], (len(doc["edge_frozen"]),))
    wf = [_unbits(s, tuple(shape)) for s, shape in zip(doc["weight_frozen"], doc["weight_shapes"])]
    theta0 = tuple(np.array(t, dtype=np.float64).reshape(shape) for t, shape in zip(doc["theta0"], doc["weight_shapes"]))
    for t in theta0:
        t.setflags(write=False)
    return TicketState(
        edge_mask=EdgeMask(np.where(ef, 0.0, 1.0), ef),
        weight_mask=gnn.WeightMask([np.where(f, 0.0, 1.0) for f in wf], wf),
        theta0=theta0,
        round=doc["round"],
        history=doc["history"],
        config=doc["config"],
    )


def save_ticket(ticket: TicketState, path) -> Path:
    path = Path(path)
    path.write_text(dumps_ticket(ticket))
    return path


def load_ticket(path) -> TicketState:
    return loads_ticket(Path(path).read_text())
