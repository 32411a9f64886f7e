import numpy as np
import pytest

from cellsearch import tensor as T

FD_STEP = 1e-5
FD_TOL = 1e-4
RETRY_STEPS = (1e-6, 1e-7, 1e-4, 1e-3)


def _central_difference(fn, inputs, proj, t, i, step):
    orig = t.data[i]
    t.data[i] = orig + step
    with T.no_grad():
        up = float((fn(*inputs).data * proj).sum())
    t.data[i] = orig - step
    with T.no_grad():
        down = float((fn(*inputs).data * proj).sum())
    t.data[i] = orig
    return (up - down) / (2 * step)


def fd_relative_error(fn, inputs, rng, step=FD_STEP, retry_steps=RETRY_STEPS):
    """Max elementwise |analytic - central FD| / (|FD| + 1e-8) of sum(fn(*inputs) * proj).

    Elements over tolerance are re-measured at ``retry_steps``.  A step that
    straddles a relu/max kink needs a smaller step, and a near-zero gradient
    (e.g. a weight feeding batchnorm) drowns in roundoff and needs a larger
    one.  A wrong gradient disagrees at every step size.
    """
    T.default_graph().clear()
    with T.no_grad():
        proj = rng.standard_normal(fn(*inputs).shape)
    for t in inputs:
        t.grad = None
    out = fn(*inputs)
    T.backward(T.sum(T.mul(out, T.Tensor(proj))))
    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        for i in np.ndindex(t.shape):
            fd = _central_difference(fn, inputs, proj, t, i, step)
            err = abs(analytic[i] - fd) / (abs(fd) + 1e-8)
            for h in retry_steps:
                if err < FD_TOL:
                    break
                fd = _central_difference(fn, inputs, proj, t, i, h)
                err = min(err, abs(analytic[i] - fd) / (abs(fd) + 1e-8))
            worst = max(worst, float(err))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _fresh_tape():
    T.default_graph().clear()
    yield
    T.default_graph().clear()


def leaf(rng, *shape):
    return T.Tensor(rng.standard_normal(shape), requires_grad=True)


# acceptance criteria report their verdicts here; printed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
