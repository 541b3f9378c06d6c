"""Wasserstein auxiliary loss head.

Rows of the softmax output are split by predicted class; each class is
compared against the rest with an entropic OT cost computed by
log-domain Sinkhorn. The whole unrolled iteration is a single tape op
whose reverse pass walks the stored potentials backwards.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc


@dataclass(frozen=True)
class SinkhornConfig:
    epsilon: float = 0.1
    max_iters: int = 100
    tol: float = 1e-6
    max_points: int = 256
    seed: int = 0

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.tol > 0:
            raise ValueError("tol must be > 0")
        if self.max_points < 1:
            raise ValueError("max_points must be >= 1")


@dataclass
class ClassPartition:
    labels: np.ndarray  # predicted class per row
    num_classes: int

    def members(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.labels == c)

    def rest(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.labels != c)


@dataclass
class TransportPlan:
    p: np.ndarray
    row_target: np.ndarray
    col_target: np.ndarray
    cost: float
    iterations: int
    converged: bool
    marginal_error: float
    trace: list = field(default_factory=list)
    dual_trace: list = field(default_factory=list)
    sinkhorn_error: float = 0.0  # row-marginal violation before rounding


def partition_by_class(z, c_total: int) -> ClassPartition:
    """Argmax per row; ties go to the lowest class index."""
    zv = z.value if isinstance(z, dc.Node) else np.asarray(z)
    if zv.shape[1] != c_total:
        raise ValueError(f"expected {c_total} columns, got {zv.shape[1]}")
    return ClassPartition(np.argmax(zv, axis=1), c_total)


def pairwise_dist(a, b) -> dc.Node:
    """Euclidean (not squared) distances between rows; zero-distance pairs get zero gradient."""
    tape = a.tape if isinstance(a, dc.Node) else b.tape if isinstance(b, dc.Node) else dc.Tape()
    a = dc._lift(tape, a)
    b = dc._lift(tape, b)
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[1]:
        raise ValueError(f"point dimension mismatch: {av.shape} vs {bv.shape}")
    diff = av[:, None, :] - bv[None, :, :]
    d = np.sqrt((diff * diff).sum(axis=2))
    inv = np.divide(1.0, d, out=np.zeros_like(d), where=d > 0)

    def vjp(g):
        w = (g * inv)[:, :, None] * diff
        return (w.sum(axis=1), -w.sum(axis=0))

    return tape.record(d, (a, b), vjp)


def _lse(x: np.ndarray, axis: int) -> np.ndarray:
    m = x.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def _run(d: np.ndarray, cfg: SinkhornConfig, trace: bool = False):
    n, m = d.shape
    log_a = np.full(n, -np.log(n))
    log_b = np.full(m, -np.log(m))
    with np.errstate(over="ignore"):
        c = d / cfg.epsilon
    if not np.all(np.isfinite(c)):
        raise FloatingPointError(
            f"cost/epsilon overflows (epsilon={cfg.epsilon}); increase epsilon"
        )
    v = np.zeros(m)
    us, vs = [], [v]
    costs, duals = [], []
    lse_row = _lse(v[None, :] - c, axis=1)
    err = np.inf
    for _ in range(cfg.max_iters):
        u = log_a - lse_row
        v = log_b - _lse(u[:, None] - c, axis=0)
        lse_row = _lse(v[None, :] - c, axis=1)
        us.append(u)
        vs.append(v)
        err = float(np.max(np.abs(np.exp(u + lse_row) - np.exp(log_a))))
        if trace:
            costs.append(float((d * np.exp(u[:, None] + v[None, :] - c)).sum()))
            # after the column update the plan has unit mass, so the dual is linear
            duals.append(float(cfg.epsilon * (np.exp(log_a) @ u + np.exp(log_b) @ v)))
        if err <= cfg.tol:
            break
    p = np.exp(us[-1][:, None] + vs[-1][None, :] - c)
    if not np.all(np.isfinite(p)):
        raise FloatingPointError(f"non-finite transport plan at epsilon={cfg.epsilon}; increase epsilon")
    return us, vs, p, err, (costs, duals), log_a, log_b


def round_to_marginals(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Move an approximate plan onto the transport polytope of ``(a, b)``.

    Rows and then columns that carry too much mass are scaled down, and
    the missing mass is added back as a rank-one correction (Altschuler,
    Weed and Rigollet, 2017). The cost moves by at most
    ``2 * max(D) * |marginal error|_1``.
    """
    rows = p.sum(axis=1)
    p = p * np.minimum(1.0, np.divide(a, rows, out=np.ones_like(a), where=rows > 0))[:, None]
    cols = p.sum(axis=0)
    p = p * np.minimum(1.0, np.divide(b, cols, out=np.ones_like(b), where=cols > 0))[None, :]
    err_a = a - p.sum(axis=1)
    err_b = b - p.sum(axis=0)
    mass = err_a.sum()
    if mass > 0:
        p = p + np.outer(err_a, err_b) / mass
    return p


def sinkhorn_plan(d, cfg: SinkhornConfig | None = None, trace: bool = False, feasible: bool = True) -> TransportPlan:
    """Entropic OT plan between uniform marginals for cost matrix ``d``.

    With ``feasible=True`` the Sinkhorn iterate is rounded onto the
    transport polytope, so the returned plan meets both marginals to
    rounding error even when the iteration stopped early; ``converged`` and
    ``sinkhorn_error`` still describe the iteration itself.
    """
    cfg = cfg or SinkhornConfig()
    d = np.asarray(d.value if isinstance(d, dc.Node) else d, dtype=np.float64)
    if d.ndim != 2 or d.size == 0:
        raise ValueError("cost matrix must be a non-empty 2-D array")
    if np.any(d < 0):
        raise ValueError("cost matrix must be non-negative")
    us, _, p, err, (costs, duals), log_a, log_b = _run(d, cfg, trace)
    a, b = np.exp(log_a), np.exp(log_b)
    if feasible:
        p = round_to_marginals(p, a, b)
    marginal = max(np.max(np.abs(p.sum(axis=1) - a)), np.max(np.abs(p.sum(axis=0) - b)))
    return TransportPlan(
        p=p,
        row_target=a,
        col_target=b,
        cost=float((d * p).sum()),
        iterations=len(us),
        converged=err <= cfg.tol,
        marginal_error=float(marginal),
        trace=costs,
        dual_trace=duals,
        sinkhorn_error=err,
    )


def sinkhorn_cost(d: dc.Node, cfg: SinkhornConfig) -> dc.Node:
    """``<D, P(D)>`` as a tape node, differentiated through every Sinkhorn step."""
    dv = d.value
    us, vs, p, _, _, log_a, log_b = _run(dv, cfg)
    eps = cfg.epsilon
    c = dv / eps
    dp = dv * p

    def vjp(g):
        g = float(g)
        d_bar = g * (p - dp / eps)
        u_bar = g * dp.sum(axis=1)
        v_bar = g * dp.sum(axis=0)
        c_bar = np.zeros_like(c)
        for k in range(len(us) - 1, -1, -1):
            u, v, v_prev = us[k], vs[k + 1], vs[k]
            # v_k = log_b - lse_i(u_k - C)
            t = np.exp(u[:, None] - c + (v - log_b)[None, :])
            u_bar = u_bar - t @ v_bar
            c_bar += t * v_bar[None, :]
            # u_k = log_a - lse_j(v_{k-1} - C)
            s = np.exp(v_prev[None, :] - c + (u - log_a)[:, None])
            v_bar = -(s.T @ u_bar)
            c_bar += s * u_bar[:, None]
            u_bar = np.zeros_like(u_bar)
        return (d_bar + c_bar / eps,)

    return d.tape.record(np.array(float(dp.sum())), (d,), vjp)


def _subsample(idx: np.ndarray, cap: int, rng: np.random.Generator) -> np.ndarray:
    if len(idx) <= cap:
        return idx
    return np.sort(rng.choice(idx, size=cap, replace=False))


def wd_cost(zc, zcbar, cfg: SinkhornConfig | None = None, key: int = 0) -> dc.Node:
    """Entropic Wasserstein cost between two point sets (rows).

    Sides larger than ``cfg.max_points`` are subsampled uniformly with a
    generator seeded from ``(cfg.seed, key)``, so repeated evaluations use
    the same points.
    """
    cfg = cfg or SinkhornConfig()
    tape = zc.tape if isinstance(zc, dc.Node) else zcbar.tape if isinstance(zcbar, dc.Node) else dc.Tape()
    zc, zcbar = dc._lift(tape, zc), dc._lift(tape, zcbar)
    if zc.shape[0] == 0 or zcbar.shape[0] == 0:
        raise ValueError("both point sets must be non-empty")
    rng = np.random.default_rng([cfg.seed, key])
    if zc.shape[0] > cfg.max_points:
        zc = dc.take_rows(zc, _subsample(np.arange(zc.shape[0]), cfg.max_points, rng))
    if zcbar.shape[0] > cfg.max_points:
        zcbar = dc.take_rows(zcbar, _subsample(np.arange(zcbar.shape[0]), cfg.max_points, rng))
    return sinkhorn_cost(pairwise_dist(zc, zcbar), cfg)


def class_wd_terms(z: dc.Node, cfg: SinkhornConfig) -> dict[int, dc.Node]:
    """Per-class WD(Z^c, Z^rest) nodes for classes with both sides non-empty."""
    part = partition_by_class(z, z.shape[1])
    terms = {}
    for c in range(part.num_classes):
        members, rest = part.members(c), part.rest(c)
        if len(members) == 0 or len(rest) == 0:
            continue
        terms[c] = wd_cost(dc.take_rows(z, members), dc.take_rows(z, rest), cfg, key=c)
    return terms


def aux_loss_l1(z, cfg: SinkhornConfig | None = None) -> dc.Node:
    """Negative sum over classes of WD between predicted members and the rest."""
    cfg = cfg or SinkhornConfig()
    if not isinstance(z, dc.Node):
        z = dc.Tape().const(z)
    terms = list(class_wd_terms(z, cfg).values())
    if not terms:
        return z.tape.const(0.0)
    acc = terms[0]
    for t in terms[1:]:
        acc = acc + t
    return -acc
