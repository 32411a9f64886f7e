"""Cell-structured search space: mixed edges, channel-group attention edges,
partial-channel edges, the stacked super-network and genotype derivation."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from fractions import Fraction
from itertools import combinations
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .ops import (
    PRIMITIVES,
    BatchNorm2d,
    ClassifierHead,
    Conv2d,
    Conv2dSpec,
    FactorizedReduce,
    Module,
    ModuleList,
    ReLUConvBN,
    make_candidate,
    max_pool2d,
)
from .tensor import ShapeError, Tensor

MODES = ("darts", "darts_attention", "g_darts_a", "g_pc_darts_a")
CELL_KINDS = ("normal", "reduce")
DEFAULT_GROUPING = (Fraction(1, 8), Fraction(1, 8), Fraction(1, 4), Fraction(1, 2))
DEFAULT_GAMMA = (2.4, 2.4, 3.2, 3.0)


class ChannelGrouping:
    """Ordered channel fractions that partition a feature map into contiguous groups."""

    def __init__(self, fractions: Sequence):
        fr = tuple(Fraction(f).limit_denominator(10**6) if isinstance(f, float) else Fraction(f) for f in fractions)
        if not fr or any(f <= 0 for f in fr):
            raise ValueError(f"grouping fractions must be positive, got {fractions!r}")
        if sum(fr) != 1:
            raise ValueError(f"grouping fractions sum to {sum(fr)}, not 1")
        self.fractions = fr

    def __len__(self) -> int:
        return len(self.fractions)

    def __eq__(self, other) -> bool:
        return isinstance(other, ChannelGrouping) and self.fractions == other.fractions

    def __repr__(self) -> str:
        return f"ChannelGrouping({', '.join(str(f) for f in self.fractions)})"

    def sizes(self, channels: int) -> list[int]:
        out = []
        for f in self.fractions:
            n = f * channels
            if n.denominator != 1:
                raise ValueError(f"group fraction {f} of {channels} channels is not an integer")
            out.append(int(n))
        return out

    def valid_for(self, channels: int) -> bool:
        try:
            self.sizes(channels)
        except ValueError:
            return False
        return True


def num_edges(nodes: int) -> int:
    return sum(j + 2 for j in range(nodes))


def edge_sources(nodes: int) -> list[tuple[int, int]]:
    """(source, target-node) per edge, grouped by target node in order."""
    return [(s, j) for j in range(nodes) for s in range(j + 2)]


def reduction_layers(cells: int) -> set[int]:
    return {i for i in (cells // 3, 2 * cells // 3) if 0 < i < cells}


# ---------------------------------------------------------------------------
# edge functions


def group_split(x: Tensor, grouping: ChannelGrouping) -> list[Tensor]:
    return T.split(x, grouping.sizes(x.shape[1]), axis=1)


def group_concat(groups: Sequence[Tensor]) -> Tensor:
    return T.concat(groups, axis=1)


def _mix(x: Tensor, weights: Tensor, ops: Sequence[Module]) -> Tensor:
    outs = [op(x) for op in ops]
    shape = outs[0].shape
    for op, o in zip(ops, outs):
        if o.shape != shape:
            raise ShapeError(f"mixed edge: {type(op).__name__} produced {o.shape}, expected {shape}")
    return T.weighted_sum(weights, outs)


def mixed_edge(x: Tensor, alpha_row: Tensor, ops: Sequence[Module]) -> Tensor:
    """softmax(alpha_row)-weighted sum of every candidate op applied to ``x``."""
    return _mix(x, T.softmax(alpha_row), ops)


def _merge(parts: list[Tensor], merge: str) -> Tensor:
    if merge == "concat":
        return group_concat(parts)
    if merge == "sum":
        out = parts[0]
        for p in parts[1:]:
            out = T.add(out, p)
        return out
    raise ValueError(f"unknown merge mode {merge!r}")


def group_attention(y: Tensor, gamma: Tensor, grouping: ChannelGrouping) -> Tensor:
    """Scale each channel group of ``y`` by its attention weight and reassemble."""
    if gamma.shape != (len(grouping),):
        raise ShapeError(f"{gamma.shape[0] if gamma.ndim else 0} attention weights for {len(grouping)} groups")
    if len(grouping) == 1:
        return T.mul(y, T.getitem(gamma, slice(0, 1)))
    parts = group_split(y, grouping)
    return group_concat([T.mul(p, T.getitem(gamma, slice(m, m + 1))) for m, p in enumerate(parts)])


def grouped_attention_edge(x: Tensor, alpha_row: Tensor, gamma: Tensor, grouping: ChannelGrouping,
                           group_ops: Sequence[Sequence[Module]], merge: str = "concat") -> Tensor:
    """Channel-group parallel sampling with attention.

    Every group shares the same ``alpha_row`` but has its own op instances
    (``group_ops[m]``) sized to the group's channel count.
    """
    if gamma.shape != (len(grouping),) or len(group_ops) != len(grouping):
        raise ShapeError(f"grouped edge: {gamma.shape} gammas, {len(group_ops)} op sets, {len(grouping)} groups")
    weights = T.softmax(alpha_row)
    if merge == "sum":
        sizes = grouping.sizes(x.shape[1])
        if len(set(sizes)) != 1:
            raise ValueError(f"merge=sum needs equal-size groups, got {sizes}")
    parts = []
    for m, xm in enumerate(group_split(x, grouping)):
        ym = _mix(xm, weights, group_ops[m])
        parts.append(T.mul(ym, T.getitem(gamma, slice(m, m + 1))))
    return _merge(parts, merge)


def channel_shuffle_perm(channels: int, groups: int) -> np.ndarray:
    """Source channel for every output channel of a ``groups``-way interleave."""
    if channels % groups:
        raise ValueError(f"{channels} channels not divisible into {groups} shuffle groups")
    return np.arange(channels).reshape(groups, channels // groups).T.reshape(-1)


def channel_shuffle(x: Tensor, groups: int) -> Tensor:
    if groups == 1:
        return x
    return T.take(x, channel_shuffle_perm(x.shape[1], groups), axis=1)


def sample_channels(channels: int, k: int, rng: Optional[np.random.Generator]) -> np.ndarray:
    """Sorted indices of the C/K channels routed through the operations.

    Without a generator the first C/K channels are taken.
    """
    if channels % k:
        raise ValueError(f"{channels} channels not divisible by K={k}")
    n = channels // k
    if rng is None:
        return np.arange(n)
    return np.sort(rng.choice(channels, size=n, replace=False))


def partial_channel_edge(x: Tensor, alpha_row: Tensor, k: int, ops: Sequence[Module],
                         mask: Optional[np.ndarray] = None, stride: int = 1) -> Tensor:
    """Send the ``mask`` channels through the mixed op, bypass the rest, then shuffle."""
    c = x.shape[1]
    if c % k:
        raise ValueError(f"{c} channels not divisible by K={k}")
    if k == 1:
        return mixed_edge(x, alpha_row, ops)
    mask = np.arange(c // k) if mask is None else np.asarray(mask)
    rest = np.setdiff1d(np.arange(c), mask)
    y = mixed_edge(T.take(x, mask, axis=1), alpha_row, ops)
    bypass = T.take(x, rest, axis=1)
    if stride == 2:
        bypass = max_pool2d(bypass, 2, 2, 0)
    return channel_shuffle(T.concat([y, bypass], axis=1), k)


def node_aggregate(edge_outputs: Sequence[Tensor], beta_row: Optional[Tensor] = None,
                   mode: str = "plain") -> Tensor:
    edge_outputs = list(edge_outputs)
    shape = edge_outputs[0].shape
    for o in edge_outputs[1:]:
        if o.shape != shape:
            raise ShapeError(f"node_aggregate: shape mismatch {shape} vs {o.shape}")
    if mode == "plain":
        out = edge_outputs[0]
        for o in edge_outputs[1:]:
            out = T.add(out, o)
        return out
    if mode == "edge_norm":
        return T.weighted_sum(T.softmax(beta_row), edge_outputs)
    raise ValueError(f"unknown aggregation mode {mode!r}")


# ---------------------------------------------------------------------------
# super-network


@dataclass
class SearchConfig:
    mode: str = "darts"
    cells: int = 8
    init_channels: int = 16
    nodes: int = 4
    num_classes: int = 10
    in_channels: int = 3
    grouping: tuple = DEFAULT_GROUPING
    gamma_init: tuple = DEFAULT_GAMMA
    k: int = 4
    conv_groups: int = 4
    edge_norm: bool = True
    merge: str = "concat"
    stem_multiplier: int = 3

    def cell_channels(self) -> list[tuple[int, bool]]:
        """(C, is_reduction) for every cell of the stack."""
        c, out = self.init_channels, []
        red = reduction_layers(self.cells)
        for i in range(self.cells):
            if i in red:
                c *= 2
            out.append((c, i in red))
        return out

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"invalid mode {self.mode!r}; expected one of {', '.join(MODES)}")
        if self.cells < 1 or self.init_channels < 1 or self.nodes < 1 or self.num_classes < 2:
            raise ValueError("cells, init_channels and nodes must be >= 1 and num_classes >= 2")
        grouping = ChannelGrouping(self.grouping)
        if self.mode != "darts" and len(self.gamma_init) != len(grouping):
            raise ValueError(f"gamma_init has {len(self.gamma_init)} values for {len(grouping)} groups")
        if self.merge not in ("concat", "sum"):
            raise ValueError(f"unknown merge mode {self.merge!r}")
        for c, red in self.cell_channels():
            if self.mode == "darts":
                continue
            if self.mode == "darts_attention":
                sizes = grouping.sizes(c)
                if self.merge == "sum" and len(set(sizes)) != 1:
                    raise ValueError(f"merge=sum needs equal-size groups, got {sizes}")
            else:
                grouping.sizes(c)
            if self.mode == "g_darts_a":
                g = self.conv_groups
                if c % g or (red and (c // 2) % g):
                    raise ValueError(f"{c} channels incompatible with conv_groups={g}")
            if self.mode == "g_pc_darts_a":
                if self.k < 1 or c % self.k:
                    raise ValueError(f"{c} channels not divisible by K={self.k}")
                if red and (c // self.k) % 2:
                    raise ValueError(f"{c // self.k} sampled channels cannot be factor-reduced")


class MixedOp(Module):
    def __init__(self, channels: int, stride: int, rng, conv_groups: int = 1):
        super().__init__()
        self.ops = ModuleList(make_candidate(p, channels, stride, rng, affine=False, conv_groups=conv_groups)
                              for p in PRIMITIVES)

    def forward(self, x, weights):
        return _mix(x, weights, self.ops)


class SearchEdge(Module):
    """One cell edge; the computation depends on the search mode."""

    def __init__(self, cfg: SearchConfig, channels: int, stride: int, rng, mask_rng=None):
        super().__init__()
        self.mode = cfg.mode
        self.stride = stride
        self.grouping = ChannelGrouping(cfg.grouping)
        self.merge = cfg.merge
        self.k = cfg.k
        self.mask_rng = mask_rng
        if cfg.mode == "darts":
            self.mixed = MixedOp(channels, stride, rng)
        elif cfg.mode == "darts_attention":
            self.groups = ModuleList(MixedOp(c, stride, rng) for c in self.grouping.sizes(channels))
        elif cfg.mode == "g_darts_a":
            self.mixed = MixedOp(channels, stride, rng, conv_groups=cfg.conv_groups)
        else:
            self.mixed = MixedOp(channels // cfg.k, stride, rng)

    def forward(self, x: Tensor, alpha_row: Tensor, gamma: Optional[Tensor]) -> Tensor:
        if self.mode == "darts":
            return mixed_edge(x, alpha_row, self.mixed.ops)
        if self.mode == "darts_attention":
            return grouped_attention_edge(x, alpha_row, gamma, self.grouping,
                                          [g.ops for g in self.groups], self.merge)
        if self.mode == "g_darts_a":
            return group_attention(mixed_edge(x, alpha_row, self.mixed.ops), gamma, self.grouping)
        rng = self.mask_rng if self.training else None
        mask = sample_channels(x.shape[1], self.k, rng)
        y = partial_channel_edge(x, alpha_row, self.k, self.mixed.ops, mask, self.stride)
        return group_attention(y, gamma, self.grouping)


class SearchCell(Module):
    def __init__(self, cfg: SearchConfig, c_pp: int, c_p: int, c: int, reduction: bool,
                 reduction_prev: bool, rng, mask_rng=None):
        super().__init__()
        self.reduction = reduction
        self.nodes = cfg.nodes
        self.aggregate = "edge_norm" if cfg.mode == "g_pc_darts_a" and cfg.edge_norm else "plain"
        if reduction_prev:
            self.preprocess0 = FactorizedReduce(c_pp, c, rng, affine=False)
        else:
            self.preprocess0 = ReLUConvBN(c_pp, c, 1, 1, 0, rng, affine=False)
        self.preprocess1 = ReLUConvBN(c_p, c, 1, 1, 0, rng, affine=False)
        self.edges = ModuleList(
            SearchEdge(cfg, c, 2 if reduction and src < 2 else 1, rng, mask_rng)
            for src, _ in edge_sources(cfg.nodes))

    def forward(self, s0, s1, alpha: Tensor, gamma: Optional[Tensor], beta: Optional[Tensor]) -> Tensor:
        states = [self.preprocess0(s0), self.preprocess1(s1)]
        weights_alpha = alpha
        e = 0
        for j in range(self.nodes):
            outs = []
            for src in range(j + 2):
                g = T.getitem(gamma, e) if gamma is not None else None
                outs.append(self.edges[e](states[src], T.getitem(weights_alpha, e), g))
                e += 1
            beta_row = T.getitem(beta, slice(e - j - 2, e)) if self.aggregate == "edge_norm" else None
            states.append(node_aggregate(outs, beta_row, self.aggregate))
        return T.concat(states[2:], axis=1)


class SuperNetwork(Module):
    """Stack of search cells sharing one alpha (and beta) table per cell kind.

    Attention weights are stored per cell in a ``[cells, edges, groups]`` table.
    """

    def __init__(self, cfg: SearchConfig, rng: np.random.Generator,
                 arch_rng: Optional[np.random.Generator] = None, mask_rng: Optional[np.random.Generator] = None):
        super().__init__()
        cfg.validate()
        self.config = cfg
        arch_rng = arch_rng if arch_rng is not None else rng
        c_cur = cfg.stem_multiplier * cfg.init_channels
        self.stem = Conv2d(Conv2dSpec(cfg.in_channels, c_cur, 3, 1, 1), rng)
        self.stem_bn = BatchNorm2d(c_cur)
        c_pp, c_p = c_cur, c_cur
        cells, reduction_prev = [], False
        for c, red in cfg.cell_channels():
            cells.append(SearchCell(cfg, c_pp, c_p, c, red, reduction_prev, rng, mask_rng))
            reduction_prev = red
            c_pp, c_p = c_p, cfg.nodes * c
        self.cells = ModuleList(cells)
        self.classifier = ClassifierHead(c_p, cfg.num_classes, rng)

        n_edges = num_edges(cfg.nodes)
        arch = {"alpha": Tensor(1e-3 * arch_rng.standard_normal((2, n_edges, len(PRIMITIVES))), requires_grad=True)}
        if cfg.mode != "darts":
            gamma = np.tile(np.asarray(cfg.gamma_init, dtype=np.float64), (cfg.cells, n_edges, 1))
            arch["gamma"] = Tensor(gamma, requires_grad=True)
        if cfg.mode == "g_pc_darts_a" and cfg.edge_norm:
            arch["beta"] = Tensor(1e-3 * arch_rng.standard_normal((2, n_edges)), requires_grad=True)
        object.__setattr__(self, "arch", arch)

    def arch_parameters(self) -> dict[str, Tensor]:
        return dict(self.arch)

    def weights(self) -> list[Tensor]:
        return self.parameters()

    def forward(self, x: Tensor) -> Tensor:
        s = self.stem_bn(self.stem(x))
        s0 = s1 = s
        alpha, gamma, beta = self.arch["alpha"], self.arch.get("gamma"), self.arch.get("beta")
        for i, cell in enumerate(self.cells):
            kind = 1 if cell.reduction else 0
            g = T.getitem(gamma, i) if gamma is not None else None
            b = T.getitem(beta, kind) if beta is not None else None
            s0, s1 = s1, cell(s0, s1, T.getitem(alpha, kind), g, b)
        return self.classifier(s1)

    def genotype(self) -> "Genotype":
        return derive_genotype(self.arch["alpha"].data, self.config.nodes)


def build_supernet(cfg: SearchConfig, seed: int = 0) -> SuperNetwork:
    from .rng import stream

    return SuperNetwork(cfg, stream(seed, "weights"), stream(seed, "arch"), stream(seed, "masks"))


# ---------------------------------------------------------------------------
# genotypes


Pair = tuple[str, int]


@dataclass(frozen=True)
class Genotype:
    normal: tuple
    reduce: tuple
    concat: tuple = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "normal", tuple(tuple(tuple(p) for p in n) for n in self.normal))
        object.__setattr__(self, "reduce", tuple(tuple(tuple(p) for p in n) for n in self.reduce))
        if not self.concat:
            object.__setattr__(self, "concat", tuple(range(2, 2 + len(self.normal))))

    @property
    def nodes(self) -> int:
        return len(self.normal)

    def cell(self, kind: str) -> tuple:
        return self.normal if kind == "normal" else self.reduce

    def validate(self) -> None:
        if len(self.normal) != len(self.reduce):
            raise ValueError("normal and reduce cells differ in node count")
        for kind in CELL_KINDS:
            for j, entry in enumerate(self.cell(kind)):
                if len(entry) != 2:
                    raise ValueError(f"{kind} node {j} has {len(entry)} inputs, expected 2")
                srcs = [s for _, s in entry]
                if len(set(srcs)) != 2:
                    raise ValueError(f"{kind} node {j} repeats source {srcs[0]}")
                for op, s in entry:
                    if op not in PRIMITIVES or op == "zero":
                        raise ValueError(f"{kind} node {j}: invalid op {op!r}")
                    if not 0 <= s < j + 2:
                        raise ValueError(f"{kind} node {j}: source {s} out of range")

    def to_text(self) -> str:
        def fmt(cell):
            return " | ".join(";".join(f"({op},{s})" for op, s in entry) for entry in cell)

        return f"normal: {fmt(self.normal)} ; reduce: {fmt(self.reduce)}\n"

    @classmethod
    def from_text(cls, text: str) -> "Genotype":
        m = re.fullmatch(r"\s*normal:(.*);\s*reduce:(.*?)\s*", text, flags=re.S)
        if not m:
            raise ValueError("genotype text must look like 'normal: ... ; reduce: ...'")

        def parse(part):
            cell = []
            for entry in part.split("|"):
                pairs = re.findall(r"\(\s*([a-z0-9_]+)\s*,\s*(\d+)\s*\)", entry)
                if not pairs:
                    raise ValueError(f"malformed genotype entry {entry.strip()!r}")
                cell.append(tuple((op, int(s)) for op, s in pairs))
            return tuple(cell)

        geno = cls(parse(m.group(1)), parse(m.group(2)))
        geno.validate()
        return geno


def _derive_cell(alpha: np.ndarray, nodes: int) -> tuple:
    w = np.exp(alpha - alpha.max(axis=-1, keepdims=True))
    w /= w.sum(axis=-1, keepdims=True)
    nz = [i for i, p in enumerate(PRIMITIVES) if p != "zero"]
    cell, start = [], 0
    for j in range(nodes):
        rows = w[start : start + j + 2][:, nz]
        best_op = rows.argmax(axis=1)
        score = rows.max(axis=1)
        ranked = sorted(range(j + 2), key=lambda s: (-score[s], s))[:2]
        cell.append(tuple((PRIMITIVES[nz[best_op[s]]], s) for s in ranked))
        start += j + 2
    return tuple(cell)


def derive_genotype(alpha, nodes: int = 4) -> Genotype:
    """Keep the two strongest incoming edges per node and their best non-zero op."""
    a = np.asarray(alpha.data if isinstance(alpha, Tensor) else alpha, dtype=np.float64)
    if a.shape != (2, num_edges(nodes), len(PRIMITIVES)):
        raise ShapeError(f"alpha table {a.shape} does not match {nodes} nodes")
    return Genotype(_derive_cell(a[0], nodes), _derive_cell(a[1], nodes))


def brute_force_genotype_cell(alpha: np.ndarray, nodes: int) -> tuple:
    """Exhaustive oracle: the 2-edge, op-choice combination of maximal total weight."""
    w = np.exp(alpha - alpha.max(axis=-1, keepdims=True))
    w /= w.sum(axis=-1, keepdims=True)
    cell, start = [], 0
    for j in range(nodes):
        best, best_key = None, None
        for e1, e2 in combinations(range(j + 2), 2):
            for o1 in range(1, len(PRIMITIVES)):
                for o2 in range(1, len(PRIMITIVES)):
                    total = w[start + e1, o1] + w[start + e2, o2]
                    if best_key is None or total > best_key:
                        best_key, best = total, {(PRIMITIVES[o1], e1), (PRIMITIVES[o2], e2)}
        cell.append(best)
        start += j + 2
    return tuple(cell)


def export_dot(genotype: Genotype, kind: str = "normal") -> str:
    """Directed-graph (DOT) rendering of one cell of ``genotype``."""
    cell = genotype.cell(kind)
    names = ["c_{k-2}", "c_{k-1}"] + [str(i) for i in range(len(cell))]
    lines = [f"digraph {kind} {{",
             "  rankdir=LR;",
             '  node [style=filled, shape=rect, fontname="times"];',
             '  edge [fontname="times"];']
    lines += [f'  "{n}" [fillcolor=darkseagreen2];' for n in names[:2]]
    lines += [f'  "{n}" [fillcolor=lightblue];' for n in names[2:]]
    lines.append('  "c_{k}" [fillcolor=palegoldenrod];')
    for j, entry in enumerate(cell):
        for op, s in entry:
            lines.append(f'  "{names[s]}" -> "{j}" [label="{op}"];')
    for j in range(len(cell)):
        lines.append(f'  "{j}" -> "c_{{k}}";')
    lines.append("}")
    return "\n".join(lines) + "\n"
