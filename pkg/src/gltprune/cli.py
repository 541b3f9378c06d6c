"""Command-line entry point: ``glt <subcommand> [--config c.json] [flags]``.

The config file is a flat JSON object. Flags override config keys, and
``--set KEY=VALUE`` (VALUE parsed as JSON when possible) overrides any key.
The output directory is ``--out``, else ``$GLT_OUT_DIR``, else the config's
``out`` key, else ``./out``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

from . import graphio, harness, pruner

OUT_ENV = "GLT_OUT_DIR"

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_DATASET = 4

SBM_KEYS = {f.name for f in fields(graphio.SbmConfig)}
PRUNE_KEYS = {f.name for f in fields(pruner.PruneConfig)}
GENERAL_KEYS = {
    "dataset", "method", "methods", "seed", "seeds", "out", "layers", "workers", "epochs", "lr",
    "transfer_head", "transfer_method", "target_dataset", "target_hidden", "save_tickets",
}  # fmt: skip
KNOWN_KEYS = (
    GENERAL_KEYS
    | PRUNE_KEYS
    | {f"sbm_{k}" for k in SBM_KEYS}
    | {f"target_sbm_{k}" for k in SBM_KEYS}
)


class ConfigError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def load_config(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed config {path}: line {exc.lineno} col {exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"malformed config {path}: expected a flat JSON object")
    for k, v in doc.items():
        if isinstance(v, dict):
            raise ConfigError(f"malformed config {path}: key {k!r} is nested; the config must be flat")
    return doc


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def merge_config(file_cfg: dict, args: argparse.Namespace) -> dict:
    cfg = dict(file_cfg)
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        cfg[k.strip()] = _parse_value(v)
    for key in ("dataset", "method", "layers", "epochs", "lr", "workers"):
        v = getattr(args, key, None)
        if v is not None:
            cfg[key] = v
    if getattr(args, "seed", None):
        cfg["seeds"] = list(args.seed)
        cfg.pop("seed", None)
    unknown = sorted(set(cfg) - KNOWN_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return cfg


def out_dir(args, cfg: dict) -> Path:
    return Path(args.out or os.environ.get(OUT_ENV) or cfg.get("out") or "out")


def dataset_spec(cfg: dict, prefix: str = "") -> harness.DatasetSpec:
    name = cfg.get(f"{prefix}dataset", "sbm")
    sbm = {k[len(prefix) + 4 :]: v for k, v in cfg.items() if k.startswith(f"{prefix}sbm_")}
    if name == "sbm":
        try:
            return graphio.SbmConfig(**sbm)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad SBM settings: {exc}") from None
    if sbm:
        raise ConfigError(f"{prefix}sbm_* keys given but {prefix}dataset is a directory")
    path = Path(name)
    if not path.is_dir():
        raise graphio.MissingFileError(f"dataset directory not found: {path}")
    return path


def prune_config(cfg: dict) -> pruner.PruneConfig:
    try:
        return pruner.PruneConfig.from_dict({k: v for k, v in cfg.items() if k in PRUNE_KEYS})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad pruning settings: {exc}") from None


def seeds_of(cfg: dict) -> list[int]:
    seeds = cfg.get("seeds", cfg.get("seed", 0))
    seeds = seeds if isinstance(seeds, list) else [seeds]
    try:
        return [int(s) for s in seeds]
    except (TypeError, ValueError):
        raise ConfigError(f"seeds must be integers, got {seeds!r}") from None


def methods_of(cfg: dict) -> list[str]:
    m = cfg.get("methods", cfg.get("method", "ours"))
    return m if isinstance(m, list) else [m]


# ---------------------------------------------------------------- subcommands


def cmd_train(args, cfg, out: Path) -> int:
    pcfg = prune_config(cfg)
    graph = harness.load_dataset(dataset_spec(cfg))
    seed = seeds_of(cfg)[0]
    epochs = int(cfg.get("epochs", pcfg.retrain_epochs))
    lr = float(cfg.get("lr", pcfg.eta2))
    fit = harness.train_dense(graph, pcfg.hidden, epochs, lr, seed, int(cfg.get("layers", 2)), pcfg.adjacency_mode)
    out.mkdir(parents=True, exist_ok=True)
    harness.write_rows_csv(fit.history, out / "train.csv")
    doc = {"seed": seed, "epochs": epochs, "best_epoch": fit.best_epoch, "val_acc": fit.val_acc, "test_acc": fit.test_acc}
    (out / "train.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    print(f"test_acc={fit.test_acc:.4f} val_acc={fit.val_acc:.4f} best_epoch={fit.best_epoch}")
    return EXIT_OK


def cmd_prune(args, cfg, out: Path) -> int:
    try:
        exp = harness.ExperimentConfig(
            dataset=dataset_spec(cfg),
            methods=tuple(methods_of(cfg)),
            prune=prune_config(cfg),
            seeds=tuple(seeds_of(cfg)),
            out_dir=out,
            layers=int(cfg.get("layers", 2)),
            workers=int(cfg.get("workers", 1)),
            save_tickets=bool(cfg.get("save_tickets", True)),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if not isinstance(exp.dataset, graphio.SbmConfig):
        harness.load_dataset(exp.dataset)  # surface file errors as a dataset error before any run starts
    summary = harness.run_experiment(exp)
    failed = [r for r in summary["runs"] if r["status"] != "ok"]
    for r in summary["final"]:
        print(f"{r['method']}: final test_acc {r['test_acc_mean']:.4f} +- {r['test_acc_std']:.4f} over {r['n']} seed(s)")
    for r in failed:
        print(f"{r['method']} seed {r['seed']} failed: {r['error']}", file=sys.stderr)
    return EXIT_FAILED if len(failed) == len(summary["runs"]) else EXIT_OK


def cmd_analyze_edges(args, cfg, out: Path) -> int:
    graph = harness.load_dataset(dataset_spec(cfg))
    layers = int(cfg.get("layers", 2))
    count, frac = graphio.edges_related_to_loss(graph, layers)
    print(f"related_edges={count} total_edges={graph.num_edges} fraction={frac:.6f}")
    return EXIT_OK


def cmd_transfer(args, cfg, out: Path) -> int:
    target = dataset_spec(cfg, "target_") if ("target_dataset" in cfg or any(k.startswith("target_sbm_") for k in cfg)) else None
    try:
        tcfg = harness.TransferConfig(
            source=dataset_spec(cfg),
            method=cfg.get("transfer_method", "ours"),
            prune=prune_config(cfg),
            layers=int(cfg.get("layers", 3)),
            epochs=int(cfg.get("epochs", 200)),
            lr=float(cfg.get("lr", 1e-2)),
            seed=seeds_of(cfg)[0],
            target_hidden=cfg.get("target_hidden"),
            **({"target": target} if target is not None else {}),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    rep = harness.run_transfer(tcfg, cfg.get("transfer_head", "replace-last"))
    harness.write_transfer(rep, out)
    for init, acc in rep.final.items():
        print(f"{init}: test_acc={acc:.4f}")
    return EXIT_OK


def cmd_wd_trace(args, cfg, out: Path) -> int:
    pcfg = prune_config(cfg)
    graph = harness.load_dataset(dataset_spec(cfg))
    out.mkdir(parents=True, exist_ok=True)
    rows = harness.run_wd_trace(
        graph,
        epochs=int(cfg.get("epochs", 100)),
        lr=float(cfg.get("lr", pcfg.eta2)),
        seed=seeds_of(cfg)[0],
        hidden=pcfg.hidden,
        ot_cfg=pcfg.sinkhorn,
        mode=pcfg.adjacency_mode,
        out_path=out / "wd_trace.csv",
    )
    r = harness.pearson([x["l0"] for x in rows[1:]], [x["wd_sum"] for x in rows[1:]])
    print(f"epochs={len(rows) - 1} pearson(l0, wd_sum)={r:.4f}")
    return EXIT_OK


def cmd_report(args, cfg, out: Path) -> int:
    src = Path(args.input)
    if not src.is_dir():
        raise FileNotFoundError(f"input directory not found: {src}")
    dest = Path(args.out) if args.out else src
    dest.mkdir(parents=True, exist_ok=True)
    table = harness.report(src, dest / "comparison.csv")
    print(f"wrote {dest / 'comparison.csv'} ({len(table)} rows)")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "prune": cmd_prune,
    "analyze-edges": cmd_analyze_edges,
    "transfer": cmd_transfer,
    "wd-trace": cmd_wd_trace,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="glt", description="Graph lottery ticket sparsification for GCNs.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--out", help=f"output directory (default: ${OUT_ENV}, config 'out', ./out)")
        if name == "report":
            s.add_argument("--in", dest="input", required=True, help="directory holding summary.json files")
            continue
        s.add_argument("--config", help="flat JSON config file")
        s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
        s.add_argument("--dataset", help="'sbm' or a planetoid-style directory")
        s.add_argument("--seed", type=int, action="append", help="repeatable")
        s.add_argument("--layers", type=int)
        if name in ("prune",):
            s.add_argument("--method", choices=pruner.METHODS)
            s.add_argument("--workers", type=int)
        if name in ("train", "transfer", "wd-trace"):
            s.add_argument("--epochs", type=int)
            s.add_argument("--lr", type=float)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            return cmd_report(args, {}, Path(args.out or args.input))
        file_cfg = load_config(args.config) if args.config else {}
        cfg = merge_config(file_cfg, args)
        return COMMANDS[args.command](args, cfg, out_dir(args, cfg))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except graphio.DatasetError as exc:
        print(f"dataset error: {exc}", file=sys.stderr)
        return EXIT_DATASET
    except (FileNotFoundError, ValueError, FloatingPointError, pruner.RoundFailure) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
