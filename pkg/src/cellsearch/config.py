"""Run configuration: a flat dataclass stored as ``section.key = value`` lines."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from fractions import Fraction
from typing import Optional

from .search import DEFAULT_GAMMA, DEFAULT_GROUPING, MODES, SearchConfig, reduction_layers

DATA_ENV = "CELLSEARCH_DATA"
SOURCES = ("synthetic", "cifar10", "cifar100")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # run
    seed: int = 0
    out: str = "runs/default"
    log_seconds: bool = False
    # data
    dataset: str = "synthetic"
    data_path: str = ""
    num_classes: int = 10
    num_samples: int = 256
    test_samples: int = 256
    image_size: int = 32
    crop_padding: int = 4
    flip: bool = True
    cutout: int = 16
    # search
    mode: str = "darts_attention"
    cells: int = 8
    init_channels: int = 16
    nodes: int = 4
    epochs: int = 50
    batch_size: int = 32
    grouping: tuple = DEFAULT_GROUPING
    gamma_init: tuple = DEFAULT_GAMMA
    k: int = 4
    conv_groups: int = 4
    edge_norm: bool = True
    merge: str = "concat"
    gamma_optimizer: str = "arch"
    arch_updates: bool = True
    # optimizers
    lr: float = 0.025
    lr_min: float = 0.0
    momentum: float = 0.9
    weight_decay: float = 3e-4
    grad_clip: float = 5.0
    arch_lr: float = 3e-4
    arch_betas: tuple = (0.5, 0.999)
    arch_weight_decay: float = 1e-3
    # evaluation
    eval_cells: int = 5
    eval_init_channels: int = 16
    eval_epochs: int = 20
    eval_batch_size: int = 32
    drop_path: float = 0.2
    auxiliary_weight: float = 0.4

    def search_config(self) -> SearchConfig:
        return SearchConfig(mode=self.mode, cells=self.cells, init_channels=self.init_channels, nodes=self.nodes,
                            num_classes=self.num_classes, grouping=tuple(self.grouping),
                            gamma_init=tuple(self.gamma_init), k=self.k, conv_groups=self.conv_groups,
                            edge_norm=self.edge_norm, merge=self.merge)

    def augmentation(self) -> Optional[dict]:
        if not (self.crop_padding or self.flip or self.cutout):
            return None
        return {"crop_padding": self.crop_padding, "flip_p": 0.5 if self.flip else 0.0,
                "cutout_length": self.cutout}

    def resolved_data_path(self) -> str:
        return self.data_path or os.environ.get(DATA_ENV, "")

    def validate(self) -> None:
        """Raise :class:`ConfigError` naming the first offending key."""
        def need(cond, key, msg):
            if not cond:
                raise ConfigError(f"{key}: {msg}")

        need(self.mode in MODES, "search.mode", f"must be one of {', '.join(MODES)}")
        need(self.dataset in SOURCES, "data.source", f"must be one of {', '.join(SOURCES)}")
        for key, v in (("search.cells", self.cells), ("search.init_channels", self.init_channels),
                       ("search.nodes", self.nodes), ("search.epochs", self.epochs),
                       ("search.batch_size", self.batch_size), ("eval.cells", self.eval_cells),
                       ("eval.init_channels", self.eval_init_channels), ("eval.epochs", self.eval_epochs),
                       ("eval.batch_size", self.eval_batch_size), ("search.k", self.k),
                       ("search.conv_groups", self.conv_groups)):
            need(v >= 1, key, "must be >= 1")
        need(self.num_classes >= 2, "data.num_classes", "must be >= 2")
        need(0 <= self.drop_path < 1, "eval.drop_path", "must be in [0, 1)")
        need(self.auxiliary_weight >= 0, "eval.auxiliary_weight", "must be >= 0")
        need(self.gamma_optimizer in ("arch", "weight"), "search.gamma_optimizer", "must be arch or weight")
        need(self.merge in ("concat", "sum"), "search.merge", "must be concat or sum")
        need(len(self.arch_betas) == 2 and all(0 <= b < 1 for b in self.arch_betas), "optim.arch_betas",
             "must be two values in [0, 1)")
        if self.dataset == "synthetic":
            need(self.image_size >= 8, "data.image_size", "must be >= 8")
            need(self.num_samples >= 2 * self.batch_size, "data.num_samples", "must cover one batch per half")
        else:
            need(self.image_size == 32, "data.image_size", "CIFAR images are 32x32")
        for key, cells in (("search.cells", self.cells), ("eval.cells", self.eval_cells)):
            factor = 2 ** len(reduction_layers(cells))
            need(self.image_size % factor == 0, "data.image_size", f"must be divisible by {factor} for {key}")
        need(len(self.gamma_init) == len(self.grouping), "search.gamma_init",
             f"has {len(self.gamma_init)} values for {len(self.grouping)} groups")
        try:
            self.search_config().validate()
        except ValueError as e:
            raise ConfigError(f"search: {e}") from None


# dotted key -> attribute
KEYS = {
    "run.seed": "seed",
    "run.out": "out",
    "run.log_seconds": "log_seconds",
    "data.source": "dataset",
    "data.path": "data_path",
    "data.num_classes": "num_classes",
    "data.num_samples": "num_samples",
    "data.test_samples": "test_samples",
    "data.image_size": "image_size",
    "data.crop_padding": "crop_padding",
    "data.flip": "flip",
    "data.cutout": "cutout",
    "search.mode": "mode",
    "search.cells": "cells",
    "search.init_channels": "init_channels",
    "search.nodes": "nodes",
    "search.epochs": "epochs",
    "search.batch_size": "batch_size",
    "search.grouping": "grouping",
    "search.gamma_init": "gamma_init",
    "search.k": "k",
    "search.conv_groups": "conv_groups",
    "search.edge_norm": "edge_norm",
    "search.merge": "merge",
    "search.gamma_optimizer": "gamma_optimizer",
    "search.arch_updates": "arch_updates",
    "optim.lr": "lr",
    "optim.lr_min": "lr_min",
    "optim.momentum": "momentum",
    "optim.weight_decay": "weight_decay",
    "optim.grad_clip": "grad_clip",
    "optim.arch_lr": "arch_lr",
    "optim.arch_betas": "arch_betas",
    "optim.arch_weight_decay": "arch_weight_decay",
    "eval.cells": "eval_cells",
    "eval.init_channels": "eval_init_channels",
    "eval.epochs": "eval_epochs",
    "eval.batch_size": "eval_batch_size",
    "eval.drop_path": "drop_path",
    "eval.auxiliary_weight": "auxiliary_weight",
}
ATTRS = {v: k for k, v in KEYS.items()}
_TYPES = {f.name: type(f.default) for f in fields(RunConfig)}


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    if isinstance(value, Fraction):
        return str(value)
    return repr(value) if isinstance(value, float) else str(value)


def parse_value(attr: str, text: str):
    text = text.strip()
    kind = _TYPES[attr]
    try:
        if kind is bool:
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind is tuple:
            parts = [p.strip() for p in text.split(",") if p.strip()]
            if attr == "grouping":
                return tuple(Fraction(p) for p in parts)
            return tuple(float(p) for p in parts)
        return text
    except (ValueError, ZeroDivisionError):
        raise ConfigError(f"{ATTRS[attr]}: cannot parse {text!r}") from None


def parse(text: str, base: Optional[RunConfig] = None) -> RunConfig:
    cfg = dataclasses.replace(base) if base is not None else RunConfig()
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"line {n}: unknown key {key!r}")
        setattr(cfg, KEYS[key], parse_value(KEYS[key], value))
    return cfg


def serialize(cfg: RunConfig) -> str:
    return "".join(f"{key} = {_format(getattr(cfg, attr))}\n" for key, attr in KEYS.items())


def set_key(cfg: RunConfig, key: str, value: str) -> None:
    attr = KEYS.get(key) or (key if key in _TYPES else None)
    if attr is None:
        raise ConfigError(f"unknown key {key!r}")
    setattr(cfg, attr, parse_value(attr, value))


def desk_config(**overrides) -> RunConfig:
    """Small synthetic search that finishes in minutes on one CPU core."""
    cfg = RunConfig(seed=7, dataset="synthetic", num_classes=4, num_samples=256, test_samples=256,
                    image_size=16, crop_padding=0, flip=False, cutout=0, cells=4, init_channels=8,
                    epochs=5, batch_size=16, eval_cells=5, eval_init_channels=16, eval_epochs=20,
                    eval_batch_size=32)
    return dataclasses.replace(cfg, **overrides)


def paper_config(**overrides) -> RunConfig:
    """CIFAR-10 search and evaluation at full scale."""
    cfg = RunConfig(dataset="cifar10", num_classes=10, image_size=32, cells=8, init_channels=16, epochs=50,
                    batch_size=32, eval_cells=20, eval_init_channels=36, eval_epochs=600, eval_batch_size=96)
    return dataclasses.replace(cfg, **overrides)


PRESETS = {"default": RunConfig, "desk": desk_config, "paper": paper_config}
