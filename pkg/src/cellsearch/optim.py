"""First-order bilevel search loop, optimizers, cosine schedule and the
evaluation-phase trainer for discrete (genotype) networks."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .data import DatasetSplit, ImageBatch, augment
from .ops import (
    BatchNorm2d,
    ClassifierHead,
    Conv2d,
    Conv2dSpec,
    FactorizedReduce,
    Identity,
    Module,
    ModuleList,
    ReLUConvBN,
    make_candidate,
    param_count,
)
from .search import Genotype, SuperNetwork, reduction_layers
from .tensor import Tensor


class NonFiniteLossError(RuntimeError):
    def __init__(self, step: int, what: str, value: float):
        super().__init__(f"non-finite {what} loss {value} at step {step}")
        self.step = step


# ---------------------------------------------------------------------------
# optimizers


class SGD:
    """Momentum SGD with L2 weight decay folded into the gradient."""

    def __init__(self, params: Sequence[Tensor], lr: float = 0.025, momentum: float = 0.9,
                 weight_decay: float = 3e-4):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data -= self.lr * v

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 3e-4, betas=(0.5, 0.999),
                 weight_decay: float = 1e-3, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = tuple(betas)
        self.weight_decay = weight_decay
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1**self.t, 1 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    total = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
    if total > max_norm:
        scale = max_norm / (total + 1e-6)
        for g in grads:
            g *= scale
    return total


@dataclass(frozen=True)
class CosineSchedule:
    lr_max: float = 0.025
    lr_min: float = 0.0
    total_epochs: int = 50

    def __call__(self, epoch: int) -> float:
        return cosine_lr(epoch, self)


def cosine_lr(epoch: int, schedule: CosineSchedule) -> float:
    if not 0 <= epoch <= schedule.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {schedule.total_epochs}]")
    frac = epoch / schedule.total_epochs if schedule.total_epochs else 0.0
    return schedule.lr_min + 0.5 * (schedule.lr_max - schedule.lr_min) * (1 + math.cos(math.pi * frac))


# ---------------------------------------------------------------------------
# search


def top1(logits: np.ndarray, labels: np.ndarray) -> float:
    return float((logits.argmax(axis=1) == labels).mean())


@dataclass
class SearchState:
    weight_opt: SGD
    arch_opt: Adam
    grad_clip: Optional[float] = 5.0
    step_count: int = 0


def make_search_state(net: SuperNetwork, lr: float = 0.025, momentum: float = 0.9, weight_decay: float = 3e-4,
                      arch_lr: float = 3e-4, arch_betas=(0.5, 0.999), arch_weight_decay: float = 1e-3,
                      grad_clip: Optional[float] = 5.0, gamma_optimizer: str = "arch") -> SearchState:
    """Optimizers for a super-network; attention weights go with ``gamma_optimizer``."""
    arch = net.arch_parameters()
    weights = net.weights()
    if gamma_optimizer == "weight" and "gamma" in arch:
        weights = weights + [arch.pop("gamma")]
    elif gamma_optimizer not in ("arch", "weight"):
        raise ValueError(f"gamma_optimizer must be 'arch' or 'weight', got {gamma_optimizer!r}")
    return SearchState(SGD(weights, lr, momentum, weight_decay),
                       Adam(list(arch.values()), arch_lr, arch_betas, arch_weight_decay),
                       grad_clip)


def _zero_all(net: SuperNetwork) -> None:
    for p in net.parameters():
        p.grad = None
    for p in net.arch.values():
        p.grad = None


def search_step(net: SuperNetwork, train_batch: ImageBatch, val_batch: ImageBatch, state: SearchState,
                update_arch: bool = True) -> tuple[float, float, float, float]:
    """One first-order bilevel iteration.

    Architecture parameters take an Adam step on the validation batch, then
    the network weights take an SGD step on the training batch.  Returns
    ``(train_loss, val_loss, train_top1, val_top1)``.
    """
    step = state.step_count
    val_loss = val_acc = float("nan")
    if update_arch:
        _zero_all(net)
        logits = net(Tensor(val_batch.images))
        loss = T.cross_entropy(logits, val_batch.labels)
        val_loss, val_acc = loss.item(), top1(logits.data, val_batch.labels)
        if not math.isfinite(val_loss):
            T.default_graph().clear()
            raise NonFiniteLossError(step, "validation", val_loss)
        T.backward(loss)
        state.arch_opt.step()

    _zero_all(net)
    logits = net(Tensor(train_batch.images))
    loss = T.cross_entropy(logits, train_batch.labels)
    train_loss, train_acc = loss.item(), top1(logits.data, train_batch.labels)
    if not math.isfinite(train_loss):
        T.default_graph().clear()
        raise NonFiniteLossError(step, "training", train_loss)
    T.backward(loss)
    if state.grad_clip:
        clip_grad_norm(state.weight_opt.params, state.grad_clip)
    state.weight_opt.step()
    _zero_all(net)
    state.step_count += 1
    return train_loss, val_loss, train_acc, val_acc


@dataclass
class EpochRecord:
    epoch: int
    step: int
    split: str
    loss: float
    top1: float
    lr: float
    seconds: float = 0.0


def run_search(net: SuperNetwork, train: DatasetSplit, val: DatasetSplit, epochs: int, batch_size: int,
               state: SearchState, schedule: CosineSchedule, rng: np.random.Generator,
               aug_rng: Optional[np.random.Generator] = None, aug: Optional[dict] = None,
               update_arch: bool = True,
               on_epoch: Optional[Callable[[int, list[EpochRecord]], None]] = None) -> list[EpochRecord]:
    """Bilevel search over ``epochs``; one train and one val record per epoch."""
    history = []
    for epoch in range(epochs):
        t0 = time.perf_counter()
        lr = cosine_lr(epoch, schedule)
        state.weight_opt.lr = lr
        net.train()
        tl, vl, ta, va = [], [], [], []
        val_iter = val.batches(batch_size, rng, drop_last=True)
        for tb in train.batches(batch_size, rng, drop_last=True):
            vb = next(val_iter, None)
            if vb is None:
                break
            if aug is not None:
                tb = augment(tb, aug_rng, **aug)
            a, b, c, d = search_step(net, tb, vb, state, update_arch)
            tl.append(a), vl.append(b), ta.append(c), va.append(d)
        secs = time.perf_counter() - t0
        recs = [EpochRecord(epoch + 1, state.step_count, "train", float(np.mean(tl)), float(np.mean(ta)), lr, secs)]
        if update_arch:
            recs.append(EpochRecord(epoch + 1, state.step_count, "val", float(np.mean(vl)), float(np.mean(va)),
                                    lr, secs))
        history.extend(recs)
        if on_epoch is not None:
            on_epoch(epoch + 1, recs)
    return history


# ---------------------------------------------------------------------------
# evaluation network


def drop_path(x: Tensor, prob: float, training: bool, rng: np.random.Generator) -> Tensor:
    """Zero each sample's path with probability ``prob``, rescaling survivors."""
    if not 0 <= prob < 1:
        raise ValueError(f"drop-path probability must be in [0, 1), got {prob}")
    if not training or prob == 0:
        return x
    keep = 1.0 - prob
    mask = rng.random(x.shape[0]) < keep
    return T.drop_path(x, mask, keep)


class EvalCell(Module):
    """Discrete cell: each node sums the outputs of its two chosen operations."""

    def __init__(self, genotype: Genotype, c_pp: int, c_p: int, c: int, reduction: bool, reduction_prev: bool,
                 rng: np.random.Generator):
        super().__init__()
        self.reduction = reduction
        self.preprocess0 = FactorizedReduce(c_pp, c, rng) if reduction_prev else ReLUConvBN(c_pp, c, 1, 1, 0, rng)
        self.preprocess1 = ReLUConvBN(c_p, c, 1, 1, 0, rng)
        cell = genotype.reduce if reduction else genotype.normal
        self.entries = [tuple(entry) for entry in cell]
        self.concat = list(genotype.concat)
        ops = []
        for entry in cell:
            for op, src in entry:
                ops.append(make_candidate(op, c, 2 if reduction and src < 2 else 1, rng, affine=True))
        self.ops = ModuleList(ops)

    def forward(self, s0, s1, drop_prob: float, rng: np.random.Generator):
        states = [self.preprocess0(s0), self.preprocess1(s1)]
        k = 0
        for entry in self.entries:
            total = None
            for _, src in entry:
                op = self.ops[k]
                k += 1
                h = op(states[src])
                if not isinstance(op, Identity):
                    h = drop_path(h, drop_prob, self.training, rng)
                total = h if total is None else T.add(total, h)
            states.append(total)
        return T.concat([states[i] for i in self.concat], axis=1)


class AuxiliaryHead(Module):
    def __init__(self, channels: int, num_classes: int, rng: np.random.Generator, hidden: int = 128):
        super().__init__()
        self.conv = Conv2d(Conv2dSpec(channels, hidden, 1), rng)
        self.bn = BatchNorm2d(hidden)
        self.head = ClassifierHead(hidden, num_classes, rng)

    def forward(self, x):
        return self.head(T.relu(self.bn(self.conv(T.relu(x)))))


class EvalNetwork(Module):
    def __init__(self, genotype: Genotype, cells: int, init_channels: int, num_classes: int,
                 rng: np.random.Generator, auxiliary: bool = True, in_channels: int = 3, stem_multiplier: int = 3):
        super().__init__()
        genotype.validate()
        nodes = genotype.nodes
        c_cur = stem_multiplier * init_channels
        self.stem = Conv2d(Conv2dSpec(in_channels, c_cur, 3, 1, 1), rng)
        self.stem_bn = BatchNorm2d(c_cur)
        c_pp, c_p, c = c_cur, c_cur, init_channels
        red_at = reduction_layers(cells)
        self.aux_at = 2 * cells // 3
        cell_list, reduction_prev = [], False
        self.aux_head = None
        for i in range(cells):
            if i in red_at:
                c *= 2
            cell_list.append(EvalCell(genotype, c_pp, c_p, c, i in red_at, reduction_prev, rng))
            reduction_prev = i in red_at
            c_pp, c_p = c_p, len(genotype.concat) * c
            if auxiliary and i == self.aux_at:
                self.aux_head = AuxiliaryHead(c_p, num_classes, rng)
        self.cells = ModuleList(cell_list)
        self.classifier = ClassifierHead(c_p, num_classes, rng)
        self.drop_prob = 0.0
        object.__setattr__(self, "drop_rng", np.random.default_rng(0))

    def forward(self, x: Tensor):
        s = self.stem_bn(self.stem(x))
        s0 = s1 = s
        aux = None
        for i, cell in enumerate(self.cells):
            s0, s1 = s1, cell(s0, s1, self.drop_prob, self.drop_rng)
            if i == self.aux_at and self.aux_head is not None and self.training:
                aux = self.aux_head(s1)
        return self.classifier(s1), aux

    def census(self) -> int:
        """Parameter count excluding the auxiliary tower."""
        aux = param_count(self.aux_head) if self.aux_head is not None else 0
        return param_count(self) - aux


def total_loss(logits: Tensor, aux_logits: Optional[Tensor], labels: np.ndarray, aux_weight: float) -> Tensor:
    loss = T.cross_entropy(logits, labels)
    if aux_logits is not None and aux_weight:
        loss = T.add(loss, T.scale(T.cross_entropy(aux_logits, labels), aux_weight))
    return loss


@dataclass
class EvalConfig:
    cells: int = 5
    init_channels: int = 16
    epochs: int = 20
    batch_size: int = 32
    drop_path: float = 0.2
    auxiliary_weight: float = 0.4
    lr: float = 0.025
    lr_min: float = 0.0
    momentum: float = 0.9
    weight_decay: float = 3e-4
    grad_clip: Optional[float] = 5.0
    aug: Optional[dict] = field(default=None)


def evaluate(net: EvalNetwork, split: DatasetSplit, batch_size: int = 64) -> tuple[float, float]:
    net.eval()
    losses, correct = [], 0
    with T.no_grad():
        for b in split.batches(batch_size):
            logits, _ = net(Tensor(b.images))
            losses.append(T.cross_entropy(logits, b.labels).item() * len(b))
            correct += int((logits.data.argmax(axis=1) == b.labels).sum())
    return float(np.sum(losses) / len(split)), correct / len(split)


def train_eval_model(genotype: Genotype, train: DatasetSplit, test: Optional[DatasetSplit], cfg: EvalConfig,
                     seed: int = 0, net: Optional[EvalNetwork] = None,
                     on_epoch: Optional[Callable[[int, list[EpochRecord]], None]] = None
                     ) -> tuple[EvalNetwork, list[EpochRecord]]:
    """Train the discrete network built from ``genotype`` with SGD and a cosine schedule."""
    from .rng import stream

    if net is None:
        net = EvalNetwork(genotype, cfg.cells, cfg.init_channels, train.num_classes, stream(seed, "weights"),
                          auxiliary=cfg.auxiliary_weight > 0, in_channels=train.images.shape[1])
    net.drop_prob = cfg.drop_path
    object.__setattr__(net, "drop_rng", stream(seed, "drop-path"))
    data_rng, aug_rng = stream(seed, "batches"), stream(seed, "augmentation")
    opt = SGD(net.parameters(), cfg.lr, cfg.momentum, cfg.weight_decay)
    schedule = CosineSchedule(cfg.lr, cfg.lr_min, cfg.epochs)
    history = []
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        opt.lr = cosine_lr(epoch, schedule)
        net.train()
        losses, accs, steps = [], [], 0
        for b in train.batches(cfg.batch_size, data_rng):
            if cfg.aug is not None:
                b = augment(b, aug_rng, **cfg.aug)
            opt.zero_grad()
            logits, aux = net(Tensor(b.images))
            loss = total_loss(logits, aux, b.labels, cfg.auxiliary_weight)
            if not math.isfinite(loss.item()):
                T.default_graph().clear()
                raise NonFiniteLossError(steps, "training", loss.item())
            T.backward(loss)
            if cfg.grad_clip:
                clip_grad_norm(opt.params, cfg.grad_clip)
            opt.step()
            losses.append(T.cross_entropy(Tensor(logits.data), b.labels).item())
            accs.append(top1(logits.data, b.labels))
            steps += 1
        secs = time.perf_counter() - t0
        recs = [EpochRecord(epoch + 1, steps * (epoch + 1), "train", float(np.mean(losses)), float(np.mean(accs)),
                            opt.lr, secs)]
        if test is not None:
            tl, ta = evaluate(net, test)
            recs.append(EpochRecord(epoch + 1, steps * (epoch + 1), "test", tl, ta, opt.lr, secs))
        history.extend(recs)
        if on_epoch is not None:
            on_epoch(epoch + 1, recs)
    opt.zero_grad()
    return net, history
