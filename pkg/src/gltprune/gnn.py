"""Masked bias-free GCN, its losses and a plain gradient-descent trainer."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import diffcore as dc
from . import otax
from .graphio import Graph, normalize_masked

LOG_FLOOR = 1e-12


@dataclass
class GcnParams:
    """Layer weights plus the read-only snapshot taken at initialization."""

    weights: list[np.ndarray]
    theta0: tuple[np.ndarray, ...] = field(default=())

    def __post_init__(self):
        self.weights = [np.array(w, dtype=np.float64) for w in self.weights]
        if not self.theta0:
            self.theta0 = tuple(w.copy() for w in self.weights)
        snap = []
        for t, w in zip(self.theta0, self.weights, strict=True):
            t = np.array(t, dtype=np.float64)
            if t.shape != w.shape:
                raise ValueError("theta0 shapes must match the weights")
            t.setflags(write=False)
            snap.append(t)
        self.theta0 = tuple(snap)

    @classmethod
    def init(cls, dims: Sequence[int], seed: int = 0) -> "GcnParams":
        """Glorot-uniform layers for ``dims = (F, H, ..., C)``."""
        rng = np.random.default_rng(seed)
        ws = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            ws.append(rng.uniform(-lim, lim, size=(fan_in, fan_out)))
        return cls(ws)

    @property
    def w0(self) -> np.ndarray:
        return self.weights[0]

    @property
    def w1(self) -> np.ndarray:
        return self.weights[1]

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.weights[0].shape[0],) + tuple(w.shape[1] for w in self.weights)

    @property
    def hidden(self) -> int:
        return self.weights[0].shape[1]

    def rewind(self) -> "GcnParams":
        self.weights = [t.copy() for t in self.theta0]
        return self

    def copy(self) -> "GcnParams":
        return GcnParams([w.copy() for w in self.weights], self.theta0)


@dataclass
class WeightMask:
    """Continuous scores per weight entry; frozen entries are pruned for good."""

    values: list[np.ndarray]
    frozen: list[np.ndarray]

    @classmethod
    def ones(cls, shapes, noise: float = 0.0, rng: np.random.Generator | None = None) -> "WeightMask":
        vals = []
        for s in shapes:
            v = np.ones(s)
            if noise > 0:
                v += (rng or np.random.default_rng()).uniform(0.0, noise, size=s)
            vals.append(v)
        return cls(vals, [np.zeros(s, dtype=bool) for s in shapes])

    @property
    def m0(self) -> np.ndarray:
        return self.values[0]

    @property
    def m1(self) -> np.ndarray:
        return self.values[1]

    def copy(self) -> "WeightMask":
        return WeightMask([v.copy() for v in self.values], [f.copy() for f in self.frozen])

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.values])

    def flat_frozen(self) -> np.ndarray:
        return np.concatenate([f.ravel() for f in self.frozen])

    def set_flat(self, values: np.ndarray, frozen: np.ndarray) -> None:
        pos = 0
        for k, v in enumerate(self.values):
            n = v.size
            self.values[k] = values[pos : pos + n].reshape(v.shape).copy()
            self.frozen[k] = frozen[pos : pos + n].reshape(v.shape).copy()
            pos += n


def gcn_forward(graph: Graph, adjacency: dc.EdgeValuedAdjacency, weights, masks) -> dc.Node:
    """``softmax(Â relu(Â X (m0⊙W0)) (m1⊙W1))``, generalized to any depth."""
    tape = adjacency.values.tape
    if len(weights) != len(masks):
        raise ValueError("need one mask per weight matrix")
    h = tape.const(graph.features)
    last = len(weights) - 1
    for layer, (w, m) in enumerate(zip(weights, masks)):
        w = dc._lift(tape, w)
        if h.shape[1] != w.shape[0]:
            raise ValueError(f"layer {layer}: input width {h.shape[1]} != weight rows {w.shape[0]}")
        eff = dc.mul(w, m) if m is not None else w
        h = dc.masked_spmm(adjacency, h @ eff)
        if layer < last:
            h = dc.relu(h)
    return dc.row_softmax(h)


def loss_l0(z: dc.Node, graph: Graph) -> dc.Node:
    """Summed cross-entropy over the labeled nodes."""
    if len(graph.train) == 0:
        raise ValueError("empty train set")
    p = dc.pick(z, graph.train, graph.labels[graph.train])
    return -dc.total(dc.log_floor(p, LOG_FLOOR))


def loss_combined(graph, adjacency, weights, masks, lam: float, ot_cfg=None):
    """``L0 + lam * L1`` on one tape. Returns ``(loss, l0, l1, z)`` nodes."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    z = gcn_forward(graph, adjacency, weights, masks)
    l0 = loss_l0(z, graph)
    if lam == 0:
        return l0, l0, None, z
    l1 = otax.aux_loss_l1(z, ot_cfg)
    return l0 + lam * l1, l0, l1, z


@dataclass
class Evaluation:
    loss: float
    l0: float
    l1: float
    z: np.ndarray
    grads: dict[str, np.ndarray]


def evaluate(
    graph: Graph,
    weights: Sequence[np.ndarray],
    wmask: Sequence[np.ndarray] | None,
    edge_values: np.ndarray,
    lam: float = 0.0,
    ot_cfg: otax.SinkhornConfig | None = None,
    mode: str = "post",
    wrt: Sequence[str] = ("w", "m", "g"),
) -> Evaluation:
    """One forward/backward pass with fresh tape.

    Gradients are keyed ``w0, w1, ...`` (weights), ``m0, m1, ...`` (weight
    mask scores) and ``g`` (edge mask), restricted to the groups in ``wrt``.
    """
    tape = dc.Tape()
    names = []
    ws, ms = [], []
    for k, w in enumerate(weights):
        if "w" in wrt:
            ws.append(tape.param(w, f"w{k}"))
            names.append(f"w{k}")
        else:
            ws.append(tape.const(w))
        if wmask is None:
            ms.append(None)
        elif "m" in wrt:
            ms.append(tape.param(wmask[k], f"m{k}"))
            names.append(f"m{k}")
        else:
            ms.append(tape.const(wmask[k]))
    if "g" in wrt:
        g = tape.param(edge_values, "g")
        names.append("g")
    else:
        g = tape.const(edge_values)
    adj = normalize_masked(graph, g, mode=mode)
    loss, l0, l1, z = loss_combined(graph, adj, ws, ms, lam, ot_cfg)
    grads = dc.backward(tape, loss, names) if names else {}
    return Evaluation(
        loss=float(loss.value),
        l0=float(l0.value),
        l1=0.0 if l1 is None else float(l1.value),
        z=z.value,
        grads=grads,
    )


def accuracy(z: np.ndarray, graph: Graph, idx) -> float:
    idx = np.asarray(idx)
    if len(idx) == 0:
        return float("nan")
    return float(np.mean(np.argmax(z[idx], axis=1) == graph.labels[idx]))


@dataclass
class FitResult:
    weights: list[np.ndarray]  # after the last epoch
    best_weights: list[np.ndarray]
    best_epoch: int
    val_acc: float
    test_acc: float
    history: list[dict]


def fit(
    graph: Graph,
    weights: Sequence[np.ndarray],
    wmask: Sequence[np.ndarray] | None,
    edge_values: np.ndarray,
    epochs: int,
    lr: float,
    mode: str = "post",
    trainable: Sequence[bool] | None = None,
) -> FitResult:
    """Plain gradient descent on L0 over the weights with masks held fixed.

    Reports test accuracy at the epoch with the best validation accuracy
    (first such epoch on ties). Epoch 0 is the untrained model. Layers with
    ``trainable[k] == False`` are kept fixed.
    """
    ws = [np.array(w, dtype=np.float64) for w in weights]
    trainable = list(trainable) if trainable is not None else [True] * len(ws)
    history = []
    best = (-1.0, 0, float("nan"))
    best_ws = [w.copy() for w in ws]
    for epoch in range(epochs + 1):
        ev = evaluate(graph, ws, wmask, edge_values, mode=mode, wrt=("w",))
        val = accuracy(ev.z, graph, graph.val)
        test = accuracy(ev.z, graph, graph.test)
        train = accuracy(ev.z, graph, graph.train)
        history.append({"epoch": epoch, "loss": ev.l0, "train_acc": train, "val_acc": val, "test_acc": test})
        if val > best[0]:
            best = (val, epoch, test)
            best_ws = [w.copy() for w in ws]
        if epoch == epochs:
            break
        for k in range(len(ws)):
            if trainable[k]:
                ws[k] = ws[k] - lr * ev.grads[f"w{k}"]
    return FitResult(ws, best_ws, best[1], best[0], best[2], history)
