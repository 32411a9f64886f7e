"""Neural building blocks: grouped convolution, pooling, batch norm, the eight
candidate operations of the cell search space, and the classifier head."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor as T
from .tensor import ShapeError, Tensor

PRIMITIVES = (
    "zero",
    "skip_connect",
    "avg_pool_3x3",
    "max_pool_3x3",
    "sep_conv_3x3",
    "sep_conv_5x5",
    "dil_conv_3x3",
    "dil_conv_5x5",
)

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _pair(v) -> Tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


# ---------------------------------------------------------------------------
# module plumbing


class Module:
    """Parameter container; attributes holding tensors or modules are registered."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for m in self._modules.values():
            yield from m.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    def __init__(self, items=()):
        super().__init__()
        object.__setattr__(self, "_items", [])
        for m in items:
            self.append(m)

    def append(self, m: Module) -> None:
        self._modules[str(len(self._items))] = m
        self._items.append(m)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


class Sequential(ModuleList):
    def forward(self, x: Tensor) -> Tensor:
        for m in self._items:
            x = m(x)
        return x


def param_count(module: Module) -> int:
    return int(sum(p.size for p in module.parameters()))


# ---------------------------------------------------------------------------
# convolution


@dataclass(frozen=True)
class Conv2dSpec:
    in_channels: int
    out_channels: int
    kernel: Tuple[int, int] = (1, 1)
    stride: Tuple[int, int] = (1, 1)
    padding: Tuple[int, int] = (0, 0)
    dilation: Tuple[int, int] = (1, 1)
    groups: int = 1
    bias: bool = False

    def __post_init__(self):
        for f in ("kernel", "stride", "padding", "dilation"):
            object.__setattr__(self, f, _pair(getattr(self, f)))
        g = self.groups
        if g < 1 or self.in_channels % g or self.out_channels % g:
            raise ValueError(
                f"channels ({self.in_channels} in, {self.out_channels} out) not divisible by groups={g}")

    @property
    def weight_shape(self) -> Tuple[int, int, int, int]:
        kh, kw = self.kernel
        return (self.out_channels, self.in_channels // self.groups, kh, kw)

    def param_count(self) -> int:
        kh, kw = self.kernel
        n = self.out_channels * (self.in_channels // self.groups) * kh * kw
        return n + (self.out_channels if self.bias else 0)

    def output_hw(self, h: int, w: int) -> Tuple[int, int]:
        (kh, kw), (sh, sw), (ph, pw), (dh, dw) = self.kernel, self.stride, self.padding, self.dilation
        return ((h + 2 * ph - dh * (kh - 1) - 1) // sh + 1,
                (w + 2 * pw - dw * (kw - 1) - 1) // sw + 1)


def _windows(xp: np.ndarray, kernel, stride, dilation, out_hw) -> np.ndarray:
    """View of shape (B, C, Ho, Wo, kh, kw) over a padded input."""
    (kh, kw), (sh, sw), (dh, dw) = kernel, stride, dilation
    ekh, ekw = dh * (kh - 1) + 1, dw * (kw - 1) + 1
    win = sliding_window_view(xp, (ekh, ekw), axis=(2, 3))
    ho, wo = out_hw
    return win[:, :, : sh * (ho - 1) + 1 : sh, : sw * (wo - 1) + 1 : sw, ::dh, ::dw]


def _scatter_windows(dwin: np.ndarray, padded_shape, kernel, stride, dilation) -> np.ndarray:
    """Adjoint of :func:`_windows` (col2im): sum window gradients into the padded input."""
    (kh, kw), (sh, sw), (dh, dw) = kernel, stride, dilation
    ho, wo = dwin.shape[2:4]
    out = np.zeros(padded_shape)
    for i in range(kh):
        for j in range(kw):
            r, c = i * dh, j * dw
            out[:, :, r : r + sh * (ho - 1) + 1 : sh, c : c + sw * (wo - 1) + 1 : sw] += dwin[:, :, :, :, i, j]
    return out


def conv2d(x: Tensor, weight: Tensor, spec: Conv2dSpec, bias: Optional[Tensor] = None) -> Tensor:
    """Grouped 2-D cross-correlation via im2col and a batched matrix multiply."""
    if x.ndim != 4 or x.shape[1] != spec.in_channels:
        raise ShapeError(f"conv2d: input {x.shape} does not have {spec.in_channels} channels")
    if weight.shape != spec.weight_shape:
        raise ShapeError(f"conv2d: weight {weight.shape} expected {spec.weight_shape}")
    if spec.kernel == (1, 1) and spec.padding == (0, 0):
        return _pointwise_conv(x, weight, spec, bias)
    if spec.groups == spec.in_channels == spec.out_channels and bias is None:
        return _depthwise_conv(x, weight, spec)
    b, c, h, w = x.shape
    g = spec.groups
    cg, og = c // g, spec.out_channels // g
    kh, kw = spec.kernel
    ph, pw = spec.padding
    ho, wo = spec.output_hw(h, w)
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x.data
    win = _windows(xp, spec.kernel, spec.stride, spec.dilation, (ho, wo))
    # cols: (g, B*Ho*Wo, cg*kh*kw)
    cols = win.reshape(b, g, cg, ho, wo, kh, kw).transpose(1, 0, 3, 4, 2, 5, 6).reshape(g, b * ho * wo, cg * kh * kw)
    wmat = weight.data.reshape(g, og, cg * kh * kw).transpose(0, 2, 1)
    out = np.matmul(cols, wmat)  # (g, BHoWo, og)
    out = out.reshape(g, b, ho, wo, og).transpose(1, 0, 4, 2, 3).reshape(b, spec.out_channels, ho, wo)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)

    def bw(gout):
        gm = gout.reshape(b, g, og, ho, wo).transpose(1, 0, 3, 4, 2).reshape(g, b * ho * wo, og)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = np.matmul(cols.transpose(0, 2, 1), gm).transpose(0, 2, 1).reshape(spec.weight_shape)
        if x.requires_grad:
            dcols = np.matmul(gm, wmat.transpose(0, 2, 1))  # (g, BHoWo, cg*kh*kw)
            dwin = dcols.reshape(g, b, ho, wo, cg, kh, kw).transpose(1, 0, 4, 2, 3, 5, 6).reshape(b, c, ho, wo, kh, kw)
            gxp = _scatter_windows(dwin, xp.shape, spec.kernel, spec.stride, spec.dilation)
            gx = gxp[:, :, ph : ph + h, pw : pw + w] if ph or pw else gxp
        if bias is not None and bias.requires_grad:
            gb = gout.sum(axis=(0, 2, 3))
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return T.make_op("conv2d", inputs, out, bw)


def _pointwise_conv(x: Tensor, weight: Tensor, spec: Conv2dSpec, bias: Optional[Tensor]) -> Tensor:
    # 1x1 kernel, no padding: a (grouped) matmul over the channel axis
    b, c, h, w = x.shape
    sh, sw = spec.stride
    g = spec.groups
    cg, og = c // g, spec.out_channels // g
    xs = x.data[:, :, ::sh, ::sw]
    ho, wo = xs.shape[2:]
    xg = xs.reshape(b, g, cg, ho * wo)
    wg = weight.data.reshape(g, og, cg)
    out = np.matmul(wg, xg).reshape(b, spec.out_channels, ho, wo)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)

    def bw(gout):
        gg = gout.reshape(b, g, og, ho * wo)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = np.matmul(gg, xg.swapaxes(-1, -2)).sum(axis=0).reshape(spec.weight_shape)
        if x.requires_grad:
            gxs = np.matmul(wg.swapaxes(-1, -2), gg).reshape(b, c, ho, wo)
            if (sh, sw) == (1, 1):
                gx = gxs
            else:
                gx = np.zeros(x.shape)
                gx[:, :, ::sh, ::sw] = gxs
        if bias is not None and bias.requires_grad:
            gb = gout.sum(axis=(0, 2, 3))
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return T.make_op("conv2d", inputs, out, bw)


def _depthwise_conv(x: Tensor, weight: Tensor, spec: Conv2dSpec) -> Tensor:
    # one multiply-add per kernel tap over the whole (B, C, Ho, Wo) block
    b, c, h, w = x.shape
    (kh, kw), (sh, sw), (dh, dw) = spec.kernel, spec.stride, spec.dilation
    ph, pw = spec.padding
    ho, wo = spec.output_hw(h, w)
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x.data
    wk = weight.data[:, 0]
    taps = [(i, j, (slice(None), slice(None), slice(i * dh, i * dh + sh * (ho - 1) + 1, sh),
                    slice(j * dw, j * dw + sw * (wo - 1) + 1, sw)))
            for i in range(kh) for j in range(kw)]
    out = np.zeros((b, c, ho, wo))
    for i, j, sl in taps:
        out += xp[sl] * wk[:, i, j].reshape(1, c, 1, 1)

    def bw(gout):
        gx = gw = None
        if weight.requires_grad:
            gw = np.empty((c, 1, kh, kw))
            for i, j, sl in taps:
                gw[:, 0, i, j] = np.einsum("bchw,bchw->c", gout, xp[sl])
        if x.requires_grad:
            gxp = np.zeros(xp.shape)
            for i, j, sl in taps:
                gxp[sl] += gout * wk[:, i, j].reshape(1, c, 1, 1)
            gx = gxp[:, :, ph : ph + h, pw : pw + w] if ph or pw else gxp
        return (gx, gw)

    return T.make_op("conv2d", (x, weight), out, bw)


def _uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv2d(Module):
    def __init__(self, spec: Conv2dSpec, rng: np.random.Generator):
        super().__init__()
        self.spec = spec
        fan_in = spec.weight_shape[1] * spec.kernel[0] * spec.kernel[1]
        self.weight = Tensor(_uniform_init(rng, spec.weight_shape, fan_in), requires_grad=True)
        self.bias = Tensor(_uniform_init(rng, (spec.out_channels,), fan_in), requires_grad=True) if spec.bias else None

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.spec, self.bias)


# ---------------------------------------------------------------------------
# pooling


def max_pool2d(x: Tensor, kernel: int = 3, stride: int = 1, padding: int = 1) -> Tensor:
    """Max pooling; the subgradient goes to the first (lowest index) maximum of each window."""
    k, s, p = _pair(kernel), _pair(stride), _pair(padding)
    b, c, h, w = x.shape
    ho, wo = (h + 2 * p[0] - k[0]) // s[0] + 1, (w + 2 * p[1] - k[1]) // s[1] + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (p[0], p[0]), (p[1], p[1])), constant_values=-np.inf)
    win = _windows(xp, k, s, (1, 1), (ho, wo)).reshape(b, c, ho, wo, k[0] * k[1])
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        onehot = (arg[..., None] == np.arange(k[0] * k[1])) * g[..., None]
        gxp = _scatter_windows(onehot.reshape(b, c, ho, wo, k[0], k[1]), xp.shape, k, s, (1, 1))
        return (gxp[:, :, p[0] : p[0] + h, p[1] : p[1] + w],)

    return T.make_op("max_pool2d", (x,), out, bw)


def avg_pool2d(x: Tensor, kernel: int = 3, stride: int = 1, padding: int = 1) -> Tensor:
    """Average pooling that divides by the number of non-padding elements per window."""
    k, s, p = _pair(kernel), _pair(stride), _pair(padding)
    b, c, h, w = x.shape
    ho, wo = (h + 2 * p[0] - k[0]) // s[0] + 1, (w + 2 * p[1] - k[1]) // s[1] + 1
    pad = ((0, 0), (0, 0), (p[0], p[0]), (p[1], p[1]))
    xp = np.pad(x.data, pad)
    ones = np.pad(np.ones((1, 1, h, w)), pad)
    count = _windows(ones, k, s, (1, 1), (ho, wo)).sum(axis=(-1, -2))
    out = _windows(xp, k, s, (1, 1), (ho, wo)).sum(axis=(-1, -2)) / count

    def bw(g):
        gw = np.broadcast_to((g / count)[..., None, None], (b, c, ho, wo, k[0], k[1]))
        gxp = _scatter_windows(gw, xp.shape, k, s, (1, 1))
        return (gxp[:, :, p[0] : p[0] + h, p[1] : p[1] + w],)

    return T.make_op("avg_pool2d", (x,), out, bw)


def global_avg_pool(x: Tensor) -> Tensor:
    b, c, h, w = x.shape
    return T.make_op("global_avg_pool", (x,), x.data.mean(axis=(2, 3)),
                     lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),))


# ---------------------------------------------------------------------------
# batch norm


def batch_norm(x: Tensor, running_mean: np.ndarray, running_var: np.ndarray,
               weight: Optional[Tensor] = None, bias: Optional[Tensor] = None,
               training: bool = True, momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> Tensor:
    """Per-channel normalization of an NCHW tensor.

    In training mode the batch statistics are used and the running buffers are
    updated in place (the running variance uses the unbiased estimate).
    """
    c = x.shape[1]
    if running_mean.shape != (c,) or (weight is not None and weight.shape != (c,)):
        raise ShapeError(f"batch_norm: {c} channels but parameters sized {running_mean.shape}")
    axes = (0, 2, 3)
    n = x.size // c
    shape = (1, c, 1, 1)
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * n / max(n - 1, 1)
    else:
        mu, var = running_mean.copy(), running_var.copy()
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(shape)) * inv.reshape(shape)
    gamma = weight.data.reshape(shape) if weight is not None else 1.0
    out = xhat * gamma + (bias.data.reshape(shape) if bias is not None else 0.0)

    def bw(g):
        gxhat = g * gamma
        if training:
            gx = inv.reshape(shape) / n * (
                n * gxhat - gxhat.sum(axis=axes, keepdims=True) - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True))
        else:
            gx = gxhat * inv.reshape(shape)
        grads = [gx]
        if weight is not None:
            grads.append((g * xhat).sum(axis=axes))
        if bias is not None:
            grads.append(g.sum(axis=axes))
        return grads

    inputs = (x,) + tuple(t for t in (weight, bias) if t is not None)
    return T.make_op("batch_norm", inputs, out, bw)


class BatchNorm2d(Module):
    def __init__(self, channels: int, affine: bool = True):
        super().__init__()
        self.channels = channels
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        if affine:
            self.weight = Tensor(np.ones(channels), requires_grad=True)
            self.bias = Tensor(np.zeros(channels), requires_grad=True)
        else:
            self.weight = self.bias = None

    def forward(self, x: Tensor) -> Tensor:
        return batch_norm(x, self.running_mean, self.running_var, self.weight, self.bias, self.training)


# ---------------------------------------------------------------------------
# layers and candidate operations


class ReLUConvBN(Module):
    def __init__(self, c_in, c_out, kernel, stride, padding, rng, affine=True):
        super().__init__()
        self.conv = Conv2d(Conv2dSpec(c_in, c_out, kernel, stride, padding), rng)
        self.bn = BatchNorm2d(c_out, affine)

    def forward(self, x):
        return self.bn(self.conv(T.relu(x)))


class DilConv(Module):
    """relu -> depthwise (dilated) conv -> pointwise conv -> batch norm."""

    def __init__(self, c_in, c_out, kernel, stride, padding, dilation, rng, affine=True, groups=1):
        super().__init__()
        self.depthwise = Conv2d(Conv2dSpec(c_in, c_in, kernel, stride, padding, dilation, groups=c_in), rng)
        self.pointwise = Conv2d(Conv2dSpec(c_in, c_out, 1, groups=groups), rng)
        self.bn = BatchNorm2d(c_out, affine)

    def forward(self, x):
        return self.bn(self.pointwise(self.depthwise(T.relu(x))))


class SepConv(Module):
    """Two stacked depthwise-separable blocks; only the first one strides."""

    def __init__(self, c_in, c_out, kernel, stride, padding, rng, affine=True, groups=1):
        super().__init__()
        self.block1 = DilConv(c_in, c_in, kernel, stride, padding, 1, rng, affine, groups)
        self.block2 = DilConv(c_in, c_out, kernel, 1, padding, 1, rng, affine, groups)

    def forward(self, x):
        return self.block2(self.block1(x))


class Identity(Module):
    def forward(self, x):
        return x


class Zero(Module):
    def __init__(self, stride: int):
        super().__init__()
        self.stride = stride

    def forward(self, x):
        s = self.stride
        return Tensor(np.zeros_like(x.data[:, :, ::s, ::s]))


class FactorizedReduce(Module):
    """Halve the spatial extent with two offset stride-2 1x1 convs, concatenated."""

    def __init__(self, c_in, c_out, rng, affine=True, groups=1):
        super().__init__()
        if c_out % 2:
            raise ValueError(f"FactorizedReduce needs an even output channel count, got {c_out}")
        self.conv1 = Conv2d(Conv2dSpec(c_in, c_out // 2, 1, 2, groups=groups), rng)
        self.conv2 = Conv2d(Conv2dSpec(c_in, c_out // 2, 1, 2, groups=groups), rng)
        self.bn = BatchNorm2d(c_out, affine)

    def forward(self, x):
        if x.shape[2] % 2 or x.shape[3] % 2:
            raise ShapeError(f"FactorizedReduce needs even spatial extents, got {x.shape}")
        x = T.relu(x)
        shifted = T.getitem(x, (slice(None), slice(None), slice(1, None), slice(1, None)))
        return self.bn(T.concat([self.conv1(x), self.conv2(shifted)], axis=1))


class Pool(Module):
    def __init__(self, kind: str, channels: int, stride: int, affine: bool):
        super().__init__()
        self.kind = kind
        self.stride = stride
        self.bn = BatchNorm2d(channels, affine)

    def forward(self, x):
        f = max_pool2d if self.kind == "max" else avg_pool2d
        return self.bn(f(x, 3, self.stride, 1))


def make_candidate(kind: str, channels: int, stride: int, rng: np.random.Generator,
                   affine: bool = False, conv_groups: int = 1) -> Module:
    """Instantiate one candidate operation that maps C channels to C channels.

    ``conv_groups`` turns the non-depthwise convolutions into grouped ones.
    """
    c = channels
    if kind == "zero":
        return Zero(stride)
    if kind == "skip_connect":
        return Identity() if stride == 1 else FactorizedReduce(c, c, rng, affine, conv_groups)
    if kind == "avg_pool_3x3":
        return Pool("avg", c, stride, affine)
    if kind == "max_pool_3x3":
        return Pool("max", c, stride, affine)
    if kind == "sep_conv_3x3":
        return SepConv(c, c, 3, stride, 1, rng, affine, conv_groups)
    if kind == "sep_conv_5x5":
        return SepConv(c, c, 5, stride, 2, rng, affine, conv_groups)
    if kind == "dil_conv_3x3":
        return DilConv(c, c, 3, stride, 2, 2, rng, affine, conv_groups)
    if kind == "dil_conv_5x5":
        return DilConv(c, c, 5, stride, 4, 2, rng, affine, conv_groups)
    raise ValueError(f"unknown candidate operation {kind!r}")


class ClassifierHead(Module):
    """Global average pool over H, W followed by an affine map to class logits."""

    def __init__(self, channels: int, num_classes: int, rng: np.random.Generator):
        super().__init__()
        self.weight = Tensor(_uniform_init(rng, (channels, num_classes), channels), requires_grad=True)
        self.bias = Tensor(_uniform_init(rng, (num_classes,), channels), requires_grad=True)

    def forward(self, features: Tensor) -> Tensor:
        return linear(global_avg_pool(features), self.weight, self.bias)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    xd, wd = x.data, weight.data
    return T.make_op("linear", (x, weight, bias), xd @ wd + bias.data,
                     lambda g: (g @ wd.T, xd.T @ g, g.sum(axis=0)))
