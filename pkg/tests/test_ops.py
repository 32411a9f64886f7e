import itertools
import zlib

import numpy as np
import pytest

from cellsearch import ops
from cellsearch import tensor as T
from cellsearch.ops import PRIMITIVES, Conv2dSpec, make_candidate
from cellsearch.tensor import ShapeError, Tensor

from conftest import FD_TOL, fd_relative_error, leaf


def naive_conv(x, w, stride, padding, dilation):
    """Direct nested-loop cross-correlation, groups=1."""
    b, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    wo = (wd + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    out = np.zeros((b, o, ho, wo))
    for n, oc, i, j in itertools.product(range(b), range(o), range(ho), range(wo)):
        acc = 0.0
        for ic, p, q in itertools.product(range(c), range(kh), range(kw)):
            acc += xp[n, ic, i * stride + p * dilation, j * stride + q * dilation] * w[oc, ic, p, q]
        out[n, oc, i, j] = acc
    return out


def sliced_group_conv(x, w, g, stride, padding, dilation):
    """Grouped conv as g independent ungrouped convs on channel slices."""
    cin, cout = x.shape[1], w.shape[0]
    parts = []
    for i in range(g):
        xs = x[:, i * cin // g : (i + 1) * cin // g]
        ws = w[i * cout // g : (i + 1) * cout // g]
        parts.append(naive_conv(xs, ws, stride, padding, dilation))
    return np.concatenate(parts, axis=1)


def test_param_count_example():
    spec = Conv2dSpec(16, 16, 3, groups=4)
    assert spec.param_count() == 16 * 4 * 3 * 3 == 576
    assert Conv2dSpec(16, 16, 3).param_count() == 2304


@pytest.mark.parametrize("cin,cout", [(16, 16), (8, 24), (12, 6)])
def test_param_count_reduction_for_every_divisor(cin, cout):
    base = Conv2dSpec(cin, cout, 3).param_count()
    for g in range(1, min(cin, cout) + 1):
        if cin % g or cout % g:
            continue
        spec = Conv2dSpec(cin, cout, 3, groups=g)
        assert spec.param_count() == cout * (cin // g) * 9
        assert spec.param_count() * g == base
        conv = ops.Conv2d(spec, np.random.default_rng(0))
        assert ops.param_count(conv) == spec.param_count()


def test_bias_counted():
    assert Conv2dSpec(4, 6, 1, bias=True).param_count() == 4 * 6 + 6


def test_indivisible_groups_rejected():
    with pytest.raises(ValueError):
        Conv2dSpec(6, 8, 3, groups=4)


def test_channel_mismatch_rejected(rng):
    spec = Conv2dSpec(4, 4, 3, padding=1)
    with pytest.raises(ShapeError):
        ops.conv2d(Tensor(rng.normal(size=(1, 3, 5, 5))), Tensor(np.zeros(spec.weight_shape)), spec)


def test_identity_1x1_conv(rng):
    x = rng.normal(size=(2, 5, 4, 4))
    w = np.eye(5).reshape(5, 5, 1, 1)
    out = ops.conv2d(Tensor(x), Tensor(w), Conv2dSpec(5, 5, 1))
    np.testing.assert_array_equal(out.data, x)


@pytest.mark.parametrize("k,s,p,d", [(3, 1, 1, 1), (3, 2, 1, 1), (5, 2, 2, 1), (3, 1, 2, 2), (5, 2, 4, 2), (1, 2, 0, 1)])
def test_ungrouped_conv_matches_naive(rng, k, s, p, d):
    x = rng.normal(size=(2, 3, 7, 6))
    w = rng.normal(size=(4, 3, k, k))
    out = ops.conv2d(Tensor(x), Tensor(w), Conv2dSpec(3, 4, k, s, p, d))
    np.testing.assert_allclose(out.data, naive_conv(x, w, s, p, d), rtol=0, atol=1e-12)


@pytest.mark.parametrize("g,cin,cout,k,s,p,d", [
    (4, 16, 16, 3, 1, 1, 1),
    (4, 8, 12, 3, 2, 1, 1),
    (2, 6, 4, 5, 1, 2, 1),
    (4, 8, 8, 1, 1, 0, 1),
    (4, 8, 8, 3, 1, 2, 2),
    (8, 8, 8, 3, 2, 1, 1),
])
def test_grouped_conv_matches_slice_oracle(rng, g, cin, cout, k, s, p, d):
    x = rng.normal(size=(2, cin, 6, 6))
    spec = Conv2dSpec(cin, cout, k, s, p, d, groups=g)
    w = rng.normal(size=spec.weight_shape)
    out = ops.conv2d(Tensor(x), Tensor(w), spec)
    np.testing.assert_allclose(out.data, sliced_group_conv(x, w, g, s, p, d), rtol=0, atol=1e-12)


def test_group_one_equals_plain_conv(rng):
    x = rng.normal(size=(2, 4, 5, 5))
    w = rng.normal(size=(6, 4, 3, 3))
    a = ops.conv2d(Tensor(x), Tensor(w), Conv2dSpec(4, 6, 3, 1, 1, groups=1))
    np.testing.assert_allclose(a.data, naive_conv(x, w, 1, 1, 1), rtol=0, atol=1e-12)


@pytest.mark.parametrize("g,shape,k,s,p,d", [
    (1, (2, 4, 5, 5), 3, 1, 1, 1),
    (2, (1, 4, 6, 6), 3, 2, 1, 1),
    (4, (2, 8, 4, 4), 3, 1, 2, 2),
    (4, (1, 8, 5, 5), 1, 1, 0, 1),
    (1, (2, 3, 4, 6), 5, 2, 2, 1),
    (2, (1, 4, 6, 6), 1, 2, 0, 1),
])
def test_conv_gradient(rng, g, shape, k, s, p, d):
    c = shape[1]
    spec = Conv2dSpec(c, c, k, s, p, d, groups=g, bias=True)
    x, w, b = leaf(rng, *shape), leaf(rng, *spec.weight_shape), leaf(rng, c)
    assert fd_relative_error(lambda x, w, b: ops.conv2d(x, w, spec, b), [x, w, b], rng) < FD_TOL


@pytest.mark.parametrize("shape,s", [((1, 2, 5, 5), 1), ((2, 3, 4, 4), 2), ((2, 4, 5, 5), 1), ((1, 1, 6, 6), 2), ((1, 2, 3, 7), 1)])
def test_depthwise_conv_gradient(rng, shape, s):
    c = shape[1]
    spec = Conv2dSpec(c, c, 3, s, 2, 2, groups=c)
    x, w = leaf(rng, *shape), leaf(rng, *spec.weight_shape)
    assert fd_relative_error(lambda x, w: ops.conv2d(x, w, spec), [x, w], rng) < FD_TOL


def brute_max_pool(x, k, s, p):
    b, c, h, w = x.shape
    ho, wo = (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
    out = np.empty((b, c, ho, wo))
    grad_to = {}
    for n, ch, i, j in itertools.product(range(b), range(c), range(ho), range(wo)):
        best, arg = -np.inf, None
        for u, v in itertools.product(range(k), range(k)):
            r, q = i * s + u - p, j * s + v - p
            if 0 <= r < h and 0 <= q < w and x[n, ch, r, q] > best:
                best, arg = x[n, ch, r, q], (r, q)
        out[n, ch, i, j] = best
        grad_to[(n, ch, i, j)] = arg
    return out, grad_to


@pytest.mark.parametrize("s", [1, 2])
def test_max_pool_matches_brute_force(rng, s):
    x = rng.normal(size=(2, 2, 5, 5))
    out = ops.max_pool2d(Tensor(x), 3, s, 1)
    expected, _ = brute_max_pool(x, 3, s, 1)
    np.testing.assert_array_equal(out.data, expected)


def test_max_pool_constant_input_routes_to_first_max():
    x = Tensor(np.full((1, 1, 5, 5), 2.5), requires_grad=True)
    out = ops.max_pool2d(x, 3, 1, 1)
    np.testing.assert_array_equal(out.data, 2.5)
    g = np.zeros(out.shape)
    g[0, 0, 2, 2] = 1.0  # interior window covers rows/cols 1..3
    T.backward(T.sum(T.mul(out, Tensor(g))))
    expected = np.zeros((1, 1, 5, 5))
    expected[0, 0, 1, 1] = 1.0
    np.testing.assert_array_equal(x.grad, expected)


def test_max_pool_gradient_matches_brute_routing(rng):
    x = Tensor(rng.normal(size=(1, 2, 5, 5)), requires_grad=True)
    out = ops.max_pool2d(x, 3, 2, 1)
    T.backward(T.sum(out))
    _, routes = brute_max_pool(x.data, 3, 2, 1)
    expected = np.zeros(x.shape)
    for (n, c, _, _), (r, q) in routes.items():
        expected[n, c, r, q] += 1
    np.testing.assert_array_equal(x.grad, expected)


def test_avg_pool_excludes_padding():
    x = Tensor(np.ones((1, 1, 4, 4)))
    np.testing.assert_allclose(ops.avg_pool2d(x, 3, 1, 1).data, 1.0, rtol=0, atol=1e-15)
    y = np.arange(16.0).reshape(1, 1, 4, 4)
    corner = ops.avg_pool2d(Tensor(y), 3, 1, 1).data[0, 0, 0, 0]
    assert corner == pytest.approx((0 + 1 + 4 + 5) / 4)


@pytest.mark.parametrize("shape,s", [((1, 2, 5, 5), 1), ((2, 2, 4, 4), 2), ((1, 3, 6, 6), 2), ((2, 1, 3, 3), 1), ((1, 2, 4, 6), 1)])
def test_pool_gradients(rng, shape, s):
    x = leaf(rng, *shape)
    assert fd_relative_error(lambda t: ops.max_pool2d(t, 3, s, 1), [x], rng) < FD_TOL
    assert fd_relative_error(lambda t: ops.avg_pool2d(t, 3, s, 1), [x], rng) < FD_TOL


def test_batchnorm_train_normalizes(rng):
    x = Tensor(rng.normal(3.0, 5.0, size=(4, 3, 5, 5)))  # var >> eps so var/(var+eps) is within 1e-6 of 1
    bn = ops.BatchNorm2d(3, affine=False)
    y = bn(x).data
    np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), 0.0, rtol=0, atol=1e-10)
    var = x.data.var(axis=(0, 2, 3))
    np.testing.assert_allclose(y.var(axis=(0, 2, 3)), var / (var + ops.BN_EPS), rtol=0, atol=1e-6)
    np.testing.assert_allclose(y.var(axis=(0, 2, 3)), 1.0, rtol=0, atol=1e-6)


def test_batchnorm_running_stats_momentum(rng):
    x = rng.normal(2.0, 1.5, size=(4, 2, 3, 3))
    bn = ops.BatchNorm2d(2)
    bn(Tensor(x))
    n = 4 * 9
    np.testing.assert_allclose(bn.running_mean, 0.1 * x.mean(axis=(0, 2, 3)), rtol=0, atol=1e-14)
    np.testing.assert_allclose(bn.running_var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * n / (n - 1), rtol=0, atol=1e-14)


def test_batchnorm_eval_identity(rng):
    x = rng.normal(size=(2, 3, 4, 4))
    bn = ops.BatchNorm2d(3).eval()
    bn.running_var[:] = 1.0 - ops.BN_EPS
    np.testing.assert_allclose(bn(Tensor(x)).data, x, rtol=0, atol=1e-15)


def test_batchnorm_channel_mismatch(rng):
    with pytest.raises(ShapeError):
        ops.BatchNorm2d(4)(Tensor(rng.normal(size=(2, 3, 2, 2))))


@pytest.mark.parametrize("shape,training", [((4, 3, 2, 2), True), ((2, 2, 3, 3), True), ((3, 1, 2, 4), True),
                                            ((2, 4, 2, 2), False), ((5, 2, 1, 2), True)])
def test_batchnorm_gradient(rng, shape, training):
    c = shape[1]
    x, w, b = leaf(rng, *shape), leaf(rng, c), leaf(rng, c)
    rm, rv = rng.normal(size=c), rng.uniform(0.5, 2, size=c)

    def f(x, w, b):
        return ops.batch_norm(x, rm.copy(), rv.copy(), w, b, training)

    assert fd_relative_error(f, [x, w, b], rng) < FD_TOL


def test_classifier_head(rng):
    head = ops.ClassifierHead(3, 5, rng)
    feats = Tensor(np.full((2, 3, 4, 4), 1.7))
    np.testing.assert_allclose(ops.global_avg_pool(feats).data, 1.7, rtol=0, atol=1e-15)
    head.weight.data[:] = 0.0
    logits = head(Tensor(rng.normal(size=(2, 3, 4, 4))))
    np.testing.assert_array_equal(logits.data, np.broadcast_to(head.bias.data, (2, 5)))


@pytest.mark.parametrize("shape", [(2, 3, 4, 4), (1, 2, 3, 3), (3, 4, 2, 2), (2, 1, 5, 3), (1, 5, 2, 4)])
def test_classifier_head_gradient(rng, shape):
    head = ops.ClassifierHead(shape[1], 3, rng)
    x = leaf(rng, *shape)
    assert fd_relative_error(lambda x, w, b: ops.linear(ops.global_avg_pool(x), w, b),
                             [x, head.weight, head.bias], rng) < FD_TOL


@pytest.mark.parametrize("kind", PRIMITIVES)
@pytest.mark.parametrize("stride", [1, 2])
def test_candidate_shape_contract(rng, kind, stride):
    c = 8
    op = make_candidate(kind, c, stride, rng)
    out = op(Tensor(rng.normal(size=(2, c, 8, 8))))
    assert out.shape == (2, c, 8 // stride, 8 // stride)
    if kind in ("zero", "avg_pool_3x3", "max_pool_3x3"):
        assert ops.param_count(op) == 0
    if kind == "zero":
        assert not out.data.any()


def test_skip_identity_and_unknown_kind(rng):
    x = Tensor(rng.normal(size=(1, 4, 4, 4)))
    assert make_candidate("skip_connect", 4, 1, rng)(x) is x
    with pytest.raises(ValueError):
        make_candidate("conv_7x7", 4, 1, rng)


def test_grouped_candidates_shrink_pointwise(rng):
    plain = ops.param_count(make_candidate("sep_conv_3x3", 16, 1, rng))
    grouped = ops.param_count(make_candidate("sep_conv_3x3", 16, 1, rng, conv_groups=4))
    # two depthwise (16*9 each) stay, two pointwise (16*16 each) shrink 4x
    assert plain == 2 * 16 * 9 + 2 * 256
    assert grouped == 2 * 16 * 9 + 2 * 64


# batch*H*W after stride stays >= 4 so BN output is not pinned to +-1
SHAPES = [(2, 4, 4, 4), (3, 2, 4, 4), (2, 2, 6, 6), (4, 4, 2, 2), (4, 2, 4, 2)]


@pytest.mark.parametrize("kind", [p for p in PRIMITIVES if p != "zero"])
@pytest.mark.parametrize("stride", [1, 2])
def test_candidate_gradients(kind, stride):
    rng = np.random.default_rng([stride, zlib.crc32(kind.encode())])
    for shape in SHAPES:
        op = make_candidate(kind, shape[1], stride, rng, affine=True)
        x = leaf(rng, *shape)
        params = op.parameters()

        def f(x, *ps):
            return op(x)

        assert fd_relative_error(f, [x, *params], rng) < FD_TOL, (kind, stride, shape)
