"""Central finite-difference checks for every differentiable op and the full objective.

Each case draws a small random configuration, reduces the op output to a
scalar through a fixed random weighting, and compares the analytic gradient
of every input with central differences (step ``1e-5``, float64). Inputs of
kinked ops (``relu``, ``abs``, ``maxpool``, the ``|cos|`` in ``Div``) are
drawn away from their kinks so the derivative exists.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import Network, NetworkSpec
from .objective import ObjectiveConfig, ScalingState, layer_diversity, total_loss
from .tensor import Tensor

STEP = 1e-5
TOL = 1e-4


def rel_error(analytic, numeric):
    a, n = np.ravel(analytic), np.ravel(numeric)
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), 1e-7))


def numeric_grad(f, arrays, step=STEP):
    """Central differences of scalar ``f()`` wrt every array in ``arrays`` (perturbed in place)."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = arr[idx]
            arr[idx] = old + step
            hi = f()
            arr[idx] = old - step
            lo = f()
            arr[idx] = old
            g[idx] = (hi - lo) / (2 * step)
        grads.append(g)
    return grads


def check(build, inputs, step=STEP):
    """Max relative error over ``inputs`` of ``build()`` (a scalar Tensor)."""
    for t in inputs:
        t.grad = None
    loss = build()
    T.backward(loss)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]
    numeric = numeric_grad(lambda: build().item(), [t.data for t in inputs], step)
    return max(rel_error(a, n) for a, n in zip(analytic, numeric))


@dataclass
class CaseResult:
    name: str
    trial: int
    error: float

    @property
    def passed(self):
        return self.error < TOL


def _param(rng, shape, low=0.0):
    """Random values with magnitude at least ``low``."""
    x = rng.standard_normal(shape)
    if low:
        x = np.sign(x) * (low + np.abs(x))
    return Tensor(x, requires_grad=True)


def _distinct(rng, shape, gap=0.05):
    """Values whose pairwise differences all exceed ``gap`` (no ties in max pooling)."""
    n = int(np.prod(shape))
    vals = (rng.permutation(n) - n / 2) * gap * 2 + rng.uniform(-gap / 2, gap / 2, n)
    return Tensor(vals.reshape(shape) / max(1.0, n * gap / 2), requires_grad=True)


def _unary(op, low=0.0):
    def case(rng):
        shape = tuple(rng.integers(1, 4, size=rng.integers(1, 3)))
        a = _param(rng, shape, low)
        r = Tensor(rng.standard_normal(shape))
        return (lambda: T.sum_(T.mul(op(a), r))), [a]
    return case


def _binary_fixed(rng, op, low_b=0.0):
    shape = tuple(int(s) for s in rng.integers(1, 4, size=rng.integers(1, 3)))
    a, b = _param(rng, shape), _param(rng, shape, low_b)
    r = Tensor(rng.standard_normal(shape))
    return (lambda: T.sum_(T.mul(op(a, b), r))), [a, b]


def _case_conv(rng):
    n, c, f = (int(v) for v in rng.integers(1, 3, size=3))
    k = int(rng.integers(1, 4))
    h = int(rng.integers(k, 6))
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    x, w = _param(rng, (n, c, h, h)), _param(rng, (f, c, k, k))
    out = T.conv2d(x, w, stride, pad)
    r = Tensor(rng.standard_normal(out.shape))
    return (lambda: T.sum_(T.mul(T.conv2d(x, w, stride, pad), r))), [x, w]


def _case_maxpool(rng):
    n, c = (int(v) for v in rng.integers(1, 3, size=2))
    size = int(rng.integers(1, 3)) + 1
    h = size * int(rng.integers(1, 3))
    x = _distinct(rng, (n, c, h, h + size))
    out = T.maxpool2d(x, size)
    r = Tensor(rng.standard_normal(out.shape))
    return (lambda: T.sum_(T.mul(T.maxpool2d(x, size), r))), [x]


def _case_matmul(rng):
    m, k, n = (int(v) for v in rng.integers(1, 4, size=3))
    a, b = _param(rng, (m, k)), _param(rng, (k, n))
    r = Tensor(rng.standard_normal((m, n)))
    return (lambda: T.sum_(T.mul(T.matmul(a, b), r))), [a, b]


def _case_reshape(rng):
    a = _param(rng, (2, 3, int(rng.integers(1, 3))))
    r = Tensor(rng.standard_normal((6, a.shape[2])))
    return (lambda: T.sum_(T.mul(T.reshape(a, (6, -1)), r))), [a]


def _case_flatten(rng):
    a = _param(rng, (2, int(rng.integers(1, 3)), 2, 2))
    r = Tensor(rng.standard_normal((2, a.size // 2)))
    return (lambda: T.sum_(T.mul(T.flatten(a), r))), [a]


def _case_transpose(rng):
    a = _param(rng, tuple(int(v) for v in rng.integers(1, 4, size=2)))
    r = Tensor(rng.standard_normal(a.shape[::-1]))
    return (lambda: T.sum_(T.mul(T.transpose(a), r))), [a]


def _case_sum(rng):
    a = _param(rng, tuple(int(v) for v in rng.integers(1, 4, size=2)))
    return (lambda: T.mul(T.sum_(a), T.sum_(a))), [a]


def _channel_input(rng):
    if rng.random() < 0.5:
        return (int(rng.integers(3, 5)), int(rng.integers(1, 4)))
    return (int(rng.integers(2, 3)), int(rng.integers(1, 4)), 2, 2)


def _case_scale_channels(rng):
    shape = _channel_input(rng)
    x, g = _param(rng, shape), _param(rng, (shape[1],))
    r = Tensor(rng.standard_normal(shape))
    return (lambda: T.sum_(T.mul(T.scale_channels(x, g), r))), [x, g]


def _case_bias_add(rng):
    shape = _channel_input(rng)
    x, b = _param(rng, shape), _param(rng, (shape[1],))
    r = Tensor(rng.standard_normal(shape))
    return (lambda: T.sum_(T.mul(T.bias_add(x, b), r))), [x, b]


def _case_batch_norm(rng):
    shape = _channel_input(rng)
    x, g, b = _param(rng, shape), _param(rng, (shape[1],)), _param(rng, (shape[1],))
    r = Tensor(rng.standard_normal(shape))

    def build():
        out, _, _ = T.batch_norm(x, g, b, train=True)
        return T.sum_(T.mul(out, r))
    return build, [x, g, b]


def _case_cross_entropy(rng):
    n, k = int(rng.integers(1, 5)), int(rng.integers(2, 5))
    logits = _param(rng, (n, k))
    labels = rng.integers(0, k, size=n)
    return (lambda: T.softmax_cross_entropy(logits, labels)), [logits]


def _case_mse(rng):
    shape = tuple(int(v) for v in rng.integers(1, 4, size=2))
    p = _param(rng, shape)
    target = rng.standard_normal(shape)
    return (lambda: T.mse(p, target)), [p]


def _case_diversity(rng):
    n, d = int(rng.integers(2, 5)), int(rng.integers(2, 6))
    while True:
        w = _param(rng, (n, d))
        wbar = w.data / np.linalg.norm(w.data, axis=1, keepdims=True)
        corr = wbar @ wbar.T
        if np.all(np.abs(corr[~np.eye(n, dtype=bool)]) > 0.05):
            break
    rows = np.sort(rng.choice(n, size=int(rng.integers(2, n + 1)), replace=False))
    return (lambda: layer_diversity(w, rows)), [w]


def _case_objective(rng):
    """Full objective on a tiny conv net with a random partial mask."""
    spec = NetworkSpec.from_string("conv3 bn relu conv3 scale relu pool flatten dense3",
                                   (2, 4, 4))
    model = Network.build(spec, seed=int(rng.integers(2**31)))
    for g in model.gamma_tensors():
        g.data[:] = np.sign(rng.standard_normal(g.shape)) * rng.uniform(0.3, 1.2, g.shape)
    state = ScalingState.from_model(model)
    while True:
        mask = rng.random(len(state)) < 0.7
        if all(m.sum() >= 2 for m in np.split(mask, state.offsets[1:-1])) and not mask.all():
            break
    state.mask = mask
    model.masks = [m.copy() for m in state.unit_masks()]
    x = rng.standard_normal((4, 2, 4, 4))
    y = rng.integers(0, 3, size=4)
    cfg = ObjectiveConfig(lambda1=float(rng.uniform(0.1, 1)), lambda2=float(rng.uniform(0.1, 1)),
                          lambda3=float(rng.uniform(0.01, 0.1)))
    inputs = [t for _, t in model.named_parameters()]
    return (lambda: total_loss(model, x, y, state, cfg, mode="train")[0]), inputs


CASES = {
    "add": lambda rng: _binary_fixed(rng, T.add),
    "sub": lambda rng: _binary_fixed(rng, T.sub),
    "mul": lambda rng: _binary_fixed(rng, T.mul),
    "div": lambda rng: _binary_fixed(rng, T.div, low_b=0.5),
    "neg": _unary(T.neg),
    "abs": _unary(T.abs_, low=0.05),
    "relu": _unary(T.relu, low=0.05),
    "sum": _case_sum,
    "reshape": _case_reshape,
    "flatten": _case_flatten,
    "transpose": _case_transpose,
    "matmul": _case_matmul,
    "conv2d": _case_conv,
    "maxpool2d": _case_maxpool,
    "scale_channels": _case_scale_channels,
    "bias_add": _case_bias_add,
    "batch_norm": _case_batch_norm,
    "softmax_cross_entropy": _case_cross_entropy,
    "mse": _case_mse,
    "layer_diversity": _case_diversity,
    "total_loss": _case_objective,
}


def run_suite(trials=100, seed=0, cases=None, objective_every=1):
    """Run every case ``trials`` times with fresh random configurations.

    ``objective_every`` thins the (slowest) full-objective case to every
    n-th trial.
    """
    names = list(CASES) if cases is None else list(cases)
    results = []
    with T.deterministic(True), warnings.catch_warnings():
        # signed scaling factors are drawn on purpose to exercise the magnitude path
        warnings.simplefilter("ignore", RuntimeWarning)
        for trial in range(trials):
            for name in names:
                if name == "total_loss" and trial % objective_every:
                    continue
                rng = np.random.default_rng([seed, trial, names.index(name)])
                build, inputs = CASES[name](rng)
                results.append(CaseResult(name, trial, check(build, inputs)))
    return results
