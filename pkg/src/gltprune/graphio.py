"""Graph container, plain-text loaders, SBM generator and masked normalization."""

from __future__ import annotations

import csv
import logging
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from . import diffcore as dc

log = logging.getLogger(__name__)


class DatasetError(Exception):
    """Base class for dataset loading problems."""


class MissingFileError(DatasetError):
    pass


class RaggedCsvError(DatasetError):
    pass


class NodeIdError(DatasetError):
    pass


@dataclass(frozen=True, eq=False)
class Graph:
    n: int
    features: np.ndarray
    labels: np.ndarray
    edges: np.ndarray  # (E, 2), i < j, unique
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    num_classes: int = 0
    dropped: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.num_classes == 0:
            object.__setattr__(self, "num_classes", int(self.labels.max()) + 1 if self.n else 0)
        edges = np.asarray(self.edges, dtype=np.intp).reshape(-1, 2)
        object.__setattr__(self, "edges", edges)
        for name in ("train", "val", "test"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.intp))
        if self.features.shape[0] != self.n or self.labels.shape[0] != self.n:
            raise ValueError("features/labels must have one row per node")
        if len(edges):
            if np.any(edges[:, 0] >= edges[:, 1]):
                raise ValueError("edges must satisfy i < j")
            if edges.max() >= self.n:
                raise ValueError("edge endpoint out of range")
            if len(np.unique(edges[:, 0] * self.n + edges[:, 1])) != len(edges):
                raise ValueError("duplicate edges")
        if self.labels.min(initial=0) < 0 or self.labels.max(initial=0) >= self.num_classes:
            raise ValueError("labels out of range")
        sets = [set(self.train.tolist()), set(self.val.tolist()), set(self.test.tolist())]
        if sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2]:
            raise ValueError("train/val/test splits overlap")
        for s in sets:
            if s and (min(s) < 0 or max(s) >= self.n):
                raise ValueError("split id out of range")
        self.features.setflags(write=False)
        self.labels.setflags(write=False)
        self.edges.setflags(write=False)

    @property
    def f(self) -> int:
        return self.features.shape[1]

    @property
    def c(self) -> int:
        return self.num_classes

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @cached_property
    def pattern(self) -> dc.SparsePattern:
        return dc.SparsePattern.build(self.n, self.edges[:, 0], self.edges[:, 1])

    def neighbors(self) -> list[list[int]]:
        adj: list[list[int]] = [[] for _ in range(self.n)]
        for i, j in self.edges.tolist():
            adj[i].append(j)
            adj[j].append(i)
        return adj


def canonical_edges(pairs) -> tuple[np.ndarray, dict]:
    """Sort endpoints, drop self-loops and duplicates; report what was dropped."""
    pairs = np.asarray(pairs, dtype=np.intp).reshape(-1, 2)
    loops = pairs[:, 0] == pairs[:, 1]
    kept = np.sort(pairs[~loops], axis=1)
    if len(kept):
        uniq = np.unique(kept, axis=0)
    else:
        uniq = kept
    return uniq, {"self_loops": int(loops.sum()), "duplicates": int(len(kept) - len(uniq))}


# ---------------------------------------------------------------- loading


def _need(path: Path) -> Path:
    if not path.is_file():
        raise MissingFileError(f"missing dataset file: {path}")
    return path


def _read_csv_matrix(path: Path, dtype) -> np.ndarray:
    rows, width = [], None
    with open(_need(path), newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise RaggedCsvError(f"{path}:{lineno}: expected {width} columns, got {len(row)}")
            try:
                rows.append([dtype(c) for c in row])
            except ValueError as exc:
                raise RaggedCsvError(f"{path}:{lineno}: {exc}") from None
    return np.array(rows, dtype=dtype).reshape(len(rows), width or 0)


def load_planetoid_dir(path) -> Graph:
    """Load a dataset directory of plain-text files.

    Expected files: ``edges.txt`` (two whitespace-separated node ids per
    line), ``features.csv`` (one row per node), ``labels.csv`` (one class id
    per line) and ``split.csv`` with ``train|val|test,<node id>`` lines.
    Self-loops and duplicate edges are dropped and counted in
    ``Graph.dropped``.
    """
    root = Path(path)
    features = _read_csv_matrix(root / "features.csv", float)
    labels = _read_csv_matrix(root / "labels.csv", int).reshape(-1)
    n = features.shape[0]
    if labels.shape[0] != n:
        raise RaggedCsvError(f"{root / 'labels.csv'}: {labels.shape[0]} labels for {n} feature rows")

    pairs = []
    epath = _need(root / "edges.txt")
    with open(epath) as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if len(parts) != 2:
                raise RaggedCsvError(f"{epath}:{lineno}: expected 2 node ids, got {len(parts)}")
            try:
                i, j = int(parts[0]), int(parts[1])
            except ValueError:
                raise RaggedCsvError(f"{epath}:{lineno}: non-integer node id") from None
            if not (0 <= i < n and 0 <= j < n):
                raise NodeIdError(f"{epath}:{lineno}: node id out of range [0, {n})")
            pairs.append((i, j))
    edges, dropped = canonical_edges(pairs)
    if dropped["self_loops"] or dropped["duplicates"]:
        log.warning("%s: dropped %d self-loops, %d duplicate edges", epath, dropped["self_loops"], dropped["duplicates"])

    split = {"train": [], "val": [], "test": []}
    spath = _need(root / "split.csv")
    with open(spath, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            if len(row) != 2 or row[0].strip() not in split:
                raise RaggedCsvError(f"{spath}:{lineno}: expected '<train|val|test>,<id>'")
            try:
                idx = int(row[1])
            except ValueError:
                raise RaggedCsvError(f"{spath}:{lineno}: non-integer node id") from None
            if not 0 <= idx < n:
                raise NodeIdError(f"{spath}:{lineno}: node id out of range [0, {n})")
            split[row[0].strip()].append(idx)

    return Graph(
        n=n,
        features=features,
        labels=labels,
        edges=edges,
        train=np.array(split["train"]),
        val=np.array(split["val"]),
        test=np.array(split["test"]),
        dropped=dropped,
    )


def save_planetoid_dir(graph: Graph, path) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "edges.txt", "w") as fh:
        fh.writelines(f"{i} {j}\n" for i, j in graph.edges.tolist())
    with open(root / "features.csv", "w", newline="") as fh:
        csv.writer(fh).writerows([repr(float(v)) for v in row] for row in graph.features)
    with open(root / "labels.csv", "w") as fh:
        fh.writelines(f"{int(y)}\n" for y in graph.labels)
    with open(root / "split.csv", "w") as fh:
        for name in ("train", "val", "test"):
            fh.writelines(f"{name},{int(i)}\n" for i in getattr(graph, name))


# ---------------------------------------------------------------- synthetic


@dataclass(frozen=True)
class SbmConfig:
    blocks: tuple[int, ...] = (100, 100, 100)
    p_in: float = 0.1
    p_out: float = 0.01
    feature_noise: float = 1.0
    feature_dim: int = 32
    train_per_class: int = 20
    val_per_class: int = 30
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(int(b) for b in self.blocks))
        if not self.blocks or min(self.blocks) < 1:
            raise ValueError("every block needs at least one node")
        if not (0.0 <= self.p_out <= self.p_in <= 1.0):
            raise ValueError("need 0 <= p_out <= p_in <= 1")
        if self.p_in == self.p_out and self.p_in > 0:
            raise ValueError("need p_out < p_in for a planted partition")
        if self.feature_dim < len(self.blocks):
            raise ValueError("feature_dim must be at least the number of classes")
        if self.feature_noise < 0:
            raise ValueError("feature_noise must be non-negative")


def generate_sbm(cfg: SbmConfig) -> Graph:
    """Planted-partition graph with one-hot class-mean features plus Gaussian noise.

    Per class, the first ``train_per_class`` nodes (in a seeded shuffle) go
    to train, the next ``val_per_class`` to validation, the rest to test.
    """
    rng = np.random.default_rng(cfg.seed)
    labels = np.repeat(np.arange(len(cfg.blocks)), cfg.blocks)
    n = len(labels)
    iu, ju = np.triu_indices(n, k=1)
    same = labels[iu] == labels[ju]
    draws = rng.random(len(iu))
    keep = draws < np.where(same, cfg.p_in, cfg.p_out)
    edges = np.stack([iu[keep], ju[keep]], axis=1)

    features = np.zeros((n, cfg.feature_dim))
    features[np.arange(n), labels] = 1.0
    features += cfg.feature_noise * rng.standard_normal(features.shape)

    train, val, test = [], [], []
    for c in range(len(cfg.blocks)):
        members = rng.permutation(np.flatnonzero(labels == c))
        train.extend(members[: cfg.train_per_class])
        val.extend(members[cfg.train_per_class : cfg.train_per_class + cfg.val_per_class])
        test.extend(members[cfg.train_per_class + cfg.val_per_class :])
    return Graph(
        n=n,
        features=features,
        labels=labels,
        edges=edges,
        train=np.sort(train),
        val=np.sort(val),
        test=np.sort(test),
        num_classes=len(cfg.blocks),
    )


# ---------------------------------------------------------------- normalization


NORMALIZATION_MODES = ("renormalize", "post")


def normalize_masked(graph: Graph, mask, mode: str = "renormalize") -> dc.EdgeValuedAdjacency:
    """Differentiable symmetric normalization of the masked adjacency.

    ``mask`` is a tape node (or an array / EdgeMask, which gets a fresh
    tape) with one value per undirected edge.

    ``mode="renormalize"``: ``D~^-1/2 (m ⊙ A + I) D~^-1/2`` with degrees
    recomputed from the masked weights; self-loops always weigh 1.

    ``mode="post"``: ``m ⊙ Â`` where ``Â`` is normalized from the unmasked
    graph, so a mask value only touches its own edge. Gradients of the
    supervised loss then vanish outside the labeled nodes' receptive field.
    """
    if mode not in NORMALIZATION_MODES:
        raise ValueError(f"unknown normalization mode {mode!r}")
    if not isinstance(mask, dc.Node):
        mask = dc.Tape().const(getattr(mask, "values", mask))
    if mask.shape != (graph.num_edges,):
        raise ValueError(f"mask has shape {mask.shape}, graph has {graph.num_edges} edges")
    rows, cols = graph.edges[:, 0], graph.edges[:, 1]
    if mode == "post":
        deg = 1.0 + np.bincount(np.concatenate([rows, cols]), minlength=graph.n)
        inv_sqrt = deg**-0.5
        values = mask * (inv_sqrt[rows] * inv_sqrt[cols])
        return dc.EdgeValuedAdjacency(graph.pattern, values, mask.tape.const(1.0 / deg))
    endpoints = np.concatenate([rows, cols])
    twice = np.concatenate([np.arange(graph.num_edges)] * 2)
    deg = 1.0 + dc.scatter_add(dc.gather(mask, twice), endpoints, graph.n)
    inv_sqrt = dc.power(deg, -0.5)
    values = mask * dc.gather(inv_sqrt, rows) * dc.gather(inv_sqrt, cols)
    return dc.EdgeValuedAdjacency(graph.pattern, values, dc.power(deg, -1.0))


# ---------------------------------------------------------------- receptive field


def hop_distance(graph: Graph, sources) -> np.ndarray:
    """Multi-source BFS distance; unreachable nodes get ``n``."""
    dist = np.full(graph.n, graph.n, dtype=np.intp)
    adj = graph.neighbors()
    queue = deque()
    for s in np.asarray(sources).tolist():
        if dist[s]:
            dist[s] = 0
            queue.append(s)
    while queue:
        u = queue.popleft()
        for v in adj[u]:
            if dist[v] > dist[u] + 1:
                dist[v] = dist[u] + 1
                queue.append(v)
    return dist


def related_edge_mask(graph: Graph, num_layers: int = 2) -> np.ndarray:
    if num_layers < 1:
        raise ValueError("num_layers must be >= 1")
    if len(graph.train) == 0:
        raise ValueError("empty train set")
    dist = hop_distance(graph, graph.train)
    if graph.num_edges == 0:
        return np.zeros(0, dtype=bool)
    near = np.minimum(dist[graph.edges[:, 0]], dist[graph.edges[:, 1]])
    return near <= num_layers - 1


def edges_related_to_loss(graph: Graph, num_layers: int = 2) -> tuple[int, float]:
    """Edges along which messages can reach a labeled node within ``num_layers`` hops."""
    related = related_edge_mask(graph, num_layers)
    count = int(related.sum())
    return count, (count / graph.num_edges if graph.num_edges else 0.0)
