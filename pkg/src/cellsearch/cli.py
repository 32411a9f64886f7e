"""Command-line entry point: ``cellsearch {search,derive,eval,report,export-dot}``."""

from __future__ import annotations

import argparse
import hashlib
import logging
import os
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import config as C
from . import snapshot
from .data import DatasetSplit, load_cifar_binary, search_halves, synthetic_dataset
from .optim import (
    CosineSchedule,
    EpochRecord,
    EvalConfig,
    EvalNetwork,
    NonFiniteLossError,
    make_search_state,
    run_search,
    train_eval_model,
)
from .ops import param_count
from .rng import stream
from .search import CELL_KINDS, Genotype, build_supernet, derive_genotype, export_dot

log = logging.getLogger("cellsearch")

METRICS_HEADER = "epoch,step,split,loss,top1,lr,seconds\n"


class CliError(Exception):
    def __init__(self, kind: str, message: str, code: int = 1):
        super().__init__(message)
        self.kind = kind
        self.code = code


# ---------------------------------------------------------------------------
# files


def _atomic_write(path: Path, data) -> None:
    tmp = path.with_name(path.name + ".tmp")
    if isinstance(data, str):
        tmp.write_text(data)
    else:
        tmp.write_bytes(data)
    os.replace(tmp, path)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def metrics_row(rec: EpochRecord, log_seconds: bool) -> str:
    secs = repr(round(rec.seconds, 3)) if log_seconds else ""
    return f"{rec.epoch},{rec.step},{rec.split},{rec.loss!r},{rec.top1!r},{rec.lr!r},{secs}\n"


def read_metrics(path) -> list[dict]:
    lines = Path(path).read_text().splitlines()
    keys = lines[0].split(",")
    return [dict(zip(keys, line.split(","))) for line in lines[1:] if line]


def write_manifest(path: Path, entries: dict, cfg: C.RunConfig, artifacts: Sequence[Path]) -> None:
    lines = [f"{k} = {v}" for k, v in entries.items()]
    lines += [f"config.{line}" for line in C.serialize(cfg).splitlines()]
    lines += [f"sha256.{p.relative_to(path.parent).as_posix()} = {_sha256(p)}" for p in artifacts]
    _atomic_write(path, "\n".join(lines) + "\n")


def read_manifest(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        if " = " in line:
            k, v = line.split(" = ", 1)
            out[k] = v
    return out


def load_genotype(path) -> Genotype:
    try:
        return Genotype.from_text(Path(path).read_text())
    except FileNotFoundError:
        raise CliError("genotype", f"no such file {path}") from None
    except ValueError as e:
        raise CliError("genotype", f"{path}: {e}") from None


# ---------------------------------------------------------------------------
# data


def load_data(cfg: C.RunConfig) -> tuple[DatasetSplit, DatasetSplit]:
    if cfg.dataset == "synthetic":
        seeds = stream(cfg.seed, "data").integers(0, 2**31, size=2)
        train = synthetic_dataset(int(seeds[0]), cfg.num_samples, cfg.num_classes, cfg.image_size)
        test = synthetic_dataset(int(seeds[1]), cfg.test_samples, cfg.num_classes, cfg.image_size, role="test")
        return train, test
    path = cfg.resolved_data_path()
    if not path:
        raise CliError("data", f"{cfg.dataset} needs data.path or ${C.DATA_ENV}")
    try:
        return load_cifar_binary(path, cfg.dataset, True), load_cifar_binary(path, cfg.dataset, False)
    except (OSError, ValueError) as e:
        raise CliError("data", str(e)) from None


# ---------------------------------------------------------------------------
# commands


def cmd_search(cfg: C.RunConfig, dry_run: bool = False) -> dict:
    """Run the bilevel search and write genotype, metrics, snapshots and manifest."""
    cfg.validate()
    scfg = cfg.search_config()
    if dry_run:
        net = build_supernet(scfg, cfg.seed)
        return {"params": param_count(net), "genotype": net.genotype()}
    train, _ = load_data(cfg)
    scfg.num_classes = train.num_classes
    out = Path(cfg.out)
    (out / "snapshots").mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    net = build_supernet(scfg, cfg.seed)
    state = make_search_state(net, cfg.lr, cfg.momentum, cfg.weight_decay, cfg.arch_lr, cfg.arch_betas,
                              cfg.arch_weight_decay, cfg.grad_clip or None, cfg.gamma_optimizer)
    s_train, s_val = search_halves(train)
    metrics = out / "metrics.csv"
    snaps: list[Path] = []

    def save_snapshots(tag: str) -> None:
        for name, p in net.arch_parameters().items():
            path = out / "snapshots" / f"{name}_{tag}.snap"
            snapshot.save(path, p.data)
            snaps.append(path)

    save_snapshots("e000")
    with metrics.open("w") as fh:
        fh.write(METRICS_HEADER)

        def on_epoch(epoch, recs):
            for r in recs:
                fh.write(metrics_row(r, cfg.log_seconds))
            fh.flush()
            save_snapshots(f"e{epoch:03d}")
            log.info("epoch %d %s", epoch, " ".join(f"{r.split}={r.loss:.4f}/{r.top1:.3f}" for r in recs))

        try:
            history = run_search(net, s_train, s_val, cfg.epochs, cfg.batch_size, state,
                                 CosineSchedule(cfg.lr, cfg.lr_min, cfg.epochs), stream(cfg.seed, "batches"),
                                 stream(cfg.seed, "augmentation"), cfg.augmentation(), cfg.arch_updates, on_epoch)
        except NonFiniteLossError as e:
            raise CliError("non-finite-loss", f"step {e.step}: {e}") from None
    geno = net.genotype()
    geno_path = out / "genotype.geno"
    _atomic_write(geno_path, geno.to_text())
    wall = time.perf_counter() - t0
    val = [r for r in history if r.split == "val"] or [r for r in history if r.split == "train"]
    write_manifest(out / "run.manifest", {
        "kind": "search",
        "mode": cfg.mode,
        "seed": cfg.seed,
        "params": param_count(net),
        "best_top1": repr(max(r.top1 for r in val)),
        "wall_seconds": f"{wall:.2f}",
        "genotype": geno.to_text().strip(),
        "metrics": "metrics.csv",
    }, cfg, [geno_path, metrics] + snaps)
    return {"genotype": geno, "history": history, "net": net, "out": out}


def cmd_derive(alpha_path, out: Optional[str] = None, nodes: int = 4) -> Genotype:
    try:
        alpha = snapshot.load(alpha_path)
    except FileNotFoundError:
        raise CliError("snapshot", f"no such file {alpha_path}") from None
    except snapshot.SnapshotError as e:
        raise CliError("snapshot", f"{alpha_path}: {e}") from None
    try:
        geno = derive_genotype(alpha, nodes)
    except ValueError as e:
        raise CliError("snapshot", f"{alpha_path}: {e}") from None
    if out:
        d = Path(out)
        d.mkdir(parents=True, exist_ok=True)
        _atomic_write(d / "genotype.geno", geno.to_text())
        for kind in CELL_KINDS:
            _atomic_write(d / f"{kind}.dot", export_dot(geno, kind))
    return geno


def eval_config(cfg: C.RunConfig) -> EvalConfig:
    return EvalConfig(cells=cfg.eval_cells, init_channels=cfg.eval_init_channels, epochs=cfg.eval_epochs,
                      batch_size=cfg.eval_batch_size, drop_path=cfg.drop_path, auxiliary_weight=cfg.auxiliary_weight,
                      lr=cfg.lr, lr_min=cfg.lr_min, momentum=cfg.momentum, weight_decay=cfg.weight_decay,
                      grad_clip=cfg.grad_clip or None, aug=cfg.augmentation())


def cmd_eval(genotype: Genotype, cfg: C.RunConfig, dry_run: bool = False) -> dict:
    cfg.validate()
    ecfg = eval_config(cfg)
    if dry_run:
        net = EvalNetwork(genotype, ecfg.cells, ecfg.init_channels, cfg.num_classes, stream(cfg.seed, "weights"))
        return {"params": net.census()}
    train, test = load_data(cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    metrics = out / "metrics.csv"
    with metrics.open("w") as fh:
        fh.write(METRICS_HEADER)

        def on_epoch(epoch, recs):
            for r in recs:
                fh.write(metrics_row(r, cfg.log_seconds))
            fh.flush()
            log.info("epoch %d %s", epoch, " ".join(f"{r.split}={r.loss:.4f}/{r.top1:.3f}" for r in recs))

        try:
            net, history = train_eval_model(genotype, train, test, ecfg, cfg.seed, on_epoch=on_epoch)
        except NonFiniteLossError as e:
            raise CliError("non-finite-loss", f"step {e.step}: {e}") from None
    geno_path = out / "genotype.geno"
    _atomic_write(geno_path, genotype.to_text())
    tests = [r for r in history if r.split == "test"] or history
    write_manifest(out / "run.manifest", {
        "kind": "eval",
        "mode": cfg.mode,
        "seed": cfg.seed,
        "params": net.census(),
        "best_top1": repr(max(r.top1 for r in tests)),
        "wall_seconds": f"{time.perf_counter() - t0:.2f}",
        "genotype": genotype.to_text().strip(),
        "metrics": "metrics.csv",
    }, cfg, [geno_path, metrics])
    return {"net": net, "history": history, "out": out}


def cmd_report(run_dirs: Sequence[str]) -> tuple[str, list[str]]:
    """Summary table (mode, params in millions, best top-1, wall time), best run first."""
    rows, missing = [], []
    for d in run_dirs:
        path = Path(d) / "run.manifest" if Path(d).is_dir() else Path(d)
        if not path.is_file():
            missing.append(str(d))
            continue
        m = read_manifest(path)
        rows.append((str(d), m.get("kind", "?"), m.get("mode", "?"), int(m.get("params", 0)),
                     float(m.get("best_top1", "nan")), float(m.get("wall_seconds", "nan"))))
    rows.sort(key=lambda r: (-r[4], r[0]))
    head = f"{'run':<32} {'kind':<7} {'mode':<16} {'params(M)':>10} {'top1(%)':>8} {'wall(s)':>9}"
    lines = [head, "-" * len(head)]
    for run, kind, mode, params, acc, wall in rows:
        lines.append(f"{run:<32} {kind:<7} {mode:<16} {params / 1e6:>10.3f} {100 * acc:>8.2f} {wall:>9.1f}")
    return "\n".join(lines) + "\n", missing


def cmd_export_dot(genotype: Genotype, out: str) -> list[Path]:
    d = Path(out)
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for kind in CELL_KINDS:
        p = d / f"{kind}.dot"
        _atomic_write(p, export_dot(genotype, kind))
        paths.append(p)
    return paths


# ---------------------------------------------------------------------------
# argument handling


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message.replace("\n", " "), 2)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--preset", choices=sorted(C.PRESETS), default="default")
    p.add_argument("--mode")
    p.add_argument("--cells", type=int)
    p.add_argument("--init-channels", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--dataset", choices=C.SOURCES)
    p.add_argument("--data-path")
    p.add_argument("--out")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    p.add_argument("--dry-run", action="store_true", help="validate and build the network only")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cellsearch", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    s = sub.add_parser("search", help="run architecture search")
    _add_config_flags(s)
    d = sub.add_parser("derive", help="derive a genotype from an alpha snapshot")
    d.add_argument("snapshot")
    d.add_argument("--nodes", type=int, default=4)
    d.add_argument("--out")
    e = sub.add_parser("eval", help="train the network described by a genotype file")
    e.add_argument("genotype")
    _add_config_flags(e)
    r = sub.add_parser("report", help="summarize run directories")
    r.add_argument("runs", nargs="+")
    x = sub.add_parser("export-dot", help="write DOT graphs for a genotype file")
    x.add_argument("genotype")
    x.add_argument("--out", default=".")
    return p


def config_from_args(args) -> C.RunConfig:
    cfg = C.PRESETS[args.preset]()
    if args.config:
        try:
            text = Path(args.config).read_text()
        except OSError as e:
            raise CliError("config", f"{args.config}: {e.strerror}", 2) from None
        cfg = C.parse(text, cfg)
    flags = {"mode": "search.mode", "cells": "search.cells", "init_channels": "search.init_channels",
             "epochs": "search.epochs", "batch_size": "search.batch_size", "seed": "run.seed",
             "dataset": "data.source", "data_path": "data.path", "out": "run.out"}
    for attr, key in flags.items():
        v = getattr(args, attr)
        if v is not None:
            C.set_key(cfg, key, str(v))
    for item in args.set:
        if "=" not in item:
            raise CliError("config", f"--set expects KEY=VALUE, got {item!r}", 2)
        k, v = item.split("=", 1)
        C.set_key(cfg, k.strip(), v)
    return cfg


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(message)s")
        if args.command == "search":
            cfg = config_from_args(args)
            res = cmd_search(cfg, args.dry_run)
            if args.dry_run:
                print(f"ok: search config valid, supernet params={res['params']}")
            else:
                print(res["genotype"].to_text(), end="")
        elif args.command == "derive":
            print(cmd_derive(args.snapshot, args.out, args.nodes).to_text(), end="")
        elif args.command == "eval":
            cfg = config_from_args(args)
            geno = load_genotype(args.genotype)
            res = cmd_eval(geno, cfg, args.dry_run)
            if args.dry_run:
                print(f"ok: eval config valid, params={res['params']}")
            else:
                last = res["history"][-1]
                print(f"{last.split} top1={last.top1:.4f} loss={last.loss:.4f}")
        elif args.command == "report":
            table, missing = cmd_report(args.runs)
            for m in missing:
                print(f"warning: missing-manifest: {m}", file=sys.stderr)
            print(table, end="")
            if len(missing) == len(args.runs):
                raise CliError("report", "no manifests found")
        elif args.command == "export-dot":
            for p in cmd_export_dot(load_genotype(args.genotype), args.out):
                print(p)
        return 0
    except CliError as e:
        print(f"error: {e.kind}: {e}", file=sys.stderr)
        return e.code
    except C.ConfigError as e:
        print(f"error: config: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
