"""Graph lottery ticket sparsification for GCNs.

Submodules: ``diffcore`` (reverse-mode AD on numpy), ``graphio`` (graphs,
loaders, SBM, normalization), ``gnn`` (masked GCN and training), ``otax``
(Sinkhorn Wasserstein head), ``pruner`` (min-max pruning, IMP, baselines)
and ``harness`` (sweeps, metrics, transfer, CLI).
"""

from .gnn import GcnParams, WeightMask
from .graphio import Graph, SbmConfig, generate_sbm, load_planetoid_dir
from .pruner import METHODS, EdgeMask, PruneConfig, TicketState, run_iterative

__version__ = "0.1.0"

__all__ = [
    "EdgeMask",
    "GcnParams",
    "Graph",
    "METHODS",
    "PruneConfig",
    "SbmConfig",
    "TicketState",
    "WeightMask",
    "generate_sbm",
    "load_planetoid_dir",
    "run_iterative",
]
