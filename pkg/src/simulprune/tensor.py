"""Dense tensors with reverse-mode automatic differentiation.

The engine is deliberately small: every differentiable operation is a
function that computes its forward value with numpy and registers a closure
mapping the output gradient to input gradients. Nodes get a monotonically
increasing id at creation, so reverse creation order is a valid reverse
topological order for :func:`backward`.

Only scalar-to-tensor broadcasting is supported by the elementwise
arithmetic. Channel-wise operations (batch norm, channel scaling) are
dedicated primitives with their own backward rules.
"""

import contextlib
import itertools
import logging

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from threadpoolctl import threadpool_limits

from .exceptions import ContractError, DegenerateStateError, NumericError, ShapeError

logger = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float64

_node_ids = itertools.count()
_check_finite = True
_deterministic = False


def set_finite_checks(enabled):
    """Toggle the NaN/Inf check performed after every forward op."""
    global _check_finite
    _check_finite = bool(enabled)


@contextlib.contextmanager
def deterministic(enabled=True):
    """Pin BLAS to one thread so reductions run in a fixed order."""
    global _deterministic
    previous = _deterministic
    _deterministic = bool(enabled)
    try:
        if enabled:
            with threadpool_limits(limits=1):
                yield
        else:
            yield
    finally:
        _deterministic = previous


def is_deterministic():
    return _deterministic


class Tensor:
    """An n-dimensional array with an optional gradient slot.

    Parameters
    ----------
    data : array_like
        Values; copied into a contiguous float array.
    requires_grad : bool, default=False
        Whether :func:`backward` should populate ``grad`` for this leaf.
    dtype : numpy dtype, optional
        ``float64`` by default, ``float32`` for speed.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.array(data, dtype=dtype or _float_dtype_of(data), copy=True)
        if arr.ndim > 0 and 0 in arr.shape:
            raise ShapeError(f"zero extent in shape {arr.shape}")
        self.data = np.ascontiguousarray(arr)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = None
        self._parents = ()
        self._backward = None
        self._id = next(_node_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return self._backward is None

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return sum_(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _float_dtype_of(data):
    if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
        return data.dtype
    return DEFAULT_DTYPE


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _make(data, parents, backward_fn, op):
    """Wrap an op's forward value; record the node only if a parent needs grad."""
    if _check_finite and not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values produced by {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out._id = next(_node_ids)
    needs = any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def backward(loss):
    """Populate ``grad`` on every ``requires_grad`` leaf reachable from ``loss``.

    Gradients accumulate into existing ``grad`` arrays, so call
    ``zero_grad`` between optimisation steps.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss is not connected to any tensor requiring grad")

    nodes = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t._id in nodes:
            continue
        nodes[t._id] = t
        stack.extend(t._parents)

    grads = {loss._id: np.ones_like(loss.data)}
    for node_id in sorted(nodes, reverse=True):
        node = nodes[node_id]
        g = grads.pop(node_id, None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.data.shape:
                raise ShapeError(f"{node.op}: gradient shape {pg.shape} != {parent.data.shape}")
            if parent._id in grads:
                grads[parent._id] = grads[parent._id] + pg
            else:
                grads[parent._id] = pg


# --------------------------------------------------------------------------
# initialisation


def he_init(shape, fan_in, seed, dtype=None):
    """Draw He-normal weights, ``N(0, 2 / fan_in)``, deterministically per seed."""
    shape = tuple(int(s) for s in shape)
    if not shape or any(s <= 0 for s in shape):
        raise ShapeError(f"invalid shape {shape}")
    if fan_in < 1:
        raise ContractError(f"fan_in must be >= 1, got {fan_in}")
    rng = np.random.default_rng(seed)
    data = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
    return Tensor(data, requires_grad=True, dtype=dtype)


# --------------------------------------------------------------------------
# elementwise arithmetic


def _binary_operands(a, b):
    a = as_tensor(a)
    b = as_tensor(b, dtype=a.dtype)
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"cannot combine shapes {a.shape} and {b.shape}")
    return a, b


def _reduce_to(g, shape, size):
    if g.shape == shape:
        return g
    if size == 1:
        return np.asarray(g.sum()).reshape(shape)
    return g.reshape(shape)


def add(a, b):
    a, b = _binary_operands(a, b)
    out = a.data + b.data

    def bw(g):
        return _reduce_to(g, a.shape, a.size), _reduce_to(g, b.shape, b.size)

    return _make(out, (a, b), bw, "add")


def sub(a, b):
    a, b = _binary_operands(a, b)
    out = a.data - b.data

    def bw(g):
        return _reduce_to(g, a.shape, a.size), _reduce_to(-g, b.shape, b.size)

    return _make(out, (a, b), bw, "sub")


def mul(a, b):
    a, b = _binary_operands(a, b)
    out = a.data * b.data

    def bw(g):
        return (
            _reduce_to(g * b.data, a.shape, a.size),
            _reduce_to(g * a.data, b.shape, b.size),
        )

    return _make(out, (a, b), bw, "mul")


def div(a, b):
    a, b = _binary_operands(a, b)
    if np.any(b.data == 0):
        raise NumericError("division by zero")
    out = a.data / b.data

    def bw(g):
        return (
            _reduce_to(g / b.data, a.shape, a.size),
            _reduce_to(-g * a.data / (b.data * b.data), b.shape, b.size),
        )

    return _make(out, (a, b), bw, "div")


def neg(a):
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def abs_(a):
    """Absolute value; subgradient ``sign(x)`` which is 0 at 0."""
    a = as_tensor(a)
    sign = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


def sum_(a):
    a = as_tensor(a)
    out = np.asarray(a.data.sum(), dtype=a.dtype)
    return _make(out, (a,), lambda g: (np.full(a.shape, g, dtype=a.dtype),), "sum")


def reshape(a, shape):
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def flatten(a):
    """Collapse every axis but the first."""
    return reshape(a, (a.shape[0], -1))


def transpose(a):
    """Swap the two axes of a matrix."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose needs a 2-d tensor, got {a.shape}")
    return _make(np.ascontiguousarray(a.data.T), (a,), lambda g: (np.ascontiguousarray(g.T),), "transpose")


def relu(x):
    """Elementwise ``max(0, x)``; subgradient 0 at 0."""
    x = as_tensor(x)
    active = x.data > 0
    return _make(np.where(active, x.data, 0.0).astype(x.dtype), (x,), lambda g: (g * active,), "relu")


# --------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner extents differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return _make(out, (a, b), bw, "matmul")


def conv2d(x, weight, stride=1, pad=0):
    """2-d cross-correlation of ``x`` (n, c, h, w) with ``weight`` (f, c, kh, kw)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d needs 4-d operands, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    f, wc, kh, kw = weight.shape
    if c != wc:
        raise ShapeError(f"input has {c} channels, weight expects {wc}")
    if stride < 1 or pad < 0:
        raise ContractError(f"bad stride/pad: {stride}/{pad}")
    if h + 2 * pad < kh or w + 2 * pad < kw:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{w + 2 * pad}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    # (n, c, oh, ow, kh, kw) view, no copy
    cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :oh, :ow]
    out = np.tensordot(cols, weight.data, axes=([1, 4, 5], [1, 2, 3]))  # n, oh, ow, f
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def bw(g):
        gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))  # f, c, kh, kw
        gcols = np.tensordot(g, weight.data, axes=([1], [0]))  # n, oh, ow, c, kh, kw
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += (
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                )
        gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
        return np.ascontiguousarray(gx), gw

    return _make(out, (x, weight), bw, "conv2d")


def maxpool2d(x, size=2):
    """Non-overlapping max pooling; trailing rows/columns that do not fill a window are dropped."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    oh, ow = h // size, w // size
    if oh == 0 or ow == 0:
        raise ShapeError(f"pool size {size} larger than input {h}x{w}")
    cropped = x.data[:, :, :oh * size, :ow * size]
    windows = cropped.reshape(n, c, oh, size, ow, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, size * size)
    arg = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gwin = np.zeros(windows.shape, dtype=g.dtype)
        np.put_along_axis(gwin, arg[..., None], g[..., None], axis=-1)
        gcrop = gwin.reshape(n, c, oh, ow, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh * size, ow * size)
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[:, :, :oh * size, :ow * size] = gcrop
        return (gx,)

    return _make(np.ascontiguousarray(out), (x,), bw, "maxpool2d")


# --------------------------------------------------------------------------
# channel-wise primitives


def _channel_axes(ndim):
    if ndim == 2:
        return (0,), (1, -1)
    if ndim == 4:
        return (0, 2, 3), (1, -1, 1, 1)
    raise ShapeError(f"channel ops need 2-d or 4-d input, got {ndim}-d")


def scale_channels(x, gamma):
    """Multiply channel ``j`` of ``x`` by ``gamma[j]``."""
    x, gamma = as_tensor(x), as_tensor(gamma)
    axes, bshape = _channel_axes(x.ndim)
    if gamma.ndim != 1 or gamma.shape[0] != x.shape[1]:
        raise ShapeError(f"gamma of shape {gamma.shape} does not match {x.shape[1]} channels")
    gb = gamma.data.reshape(bshape)
    out = x.data * gb

    def bw(g):
        return g * gb, (g * x.data).sum(axis=axes)

    return _make(out, (x, gamma), bw, "scale_channels")


def bias_add(x, bias):
    """Add ``bias[j]`` to every element of channel ``j``."""
    x, bias = as_tensor(x), as_tensor(bias)
    axes, bshape = _channel_axes(x.ndim)
    if bias.shape != (x.shape[1],):
        raise ShapeError(f"bias of shape {bias.shape} does not match {x.shape[1]} channels")
    out = x.data + bias.data.reshape(bshape)
    return _make(out, (x, bias), lambda g: (g, g.sum(axis=axes)), "bias_add")


def batch_norm(x, gamma, beta, running_mean=None, running_var=None, eps=1e-5, train=True):
    """Normalise per channel and apply ``gamma * z + beta``.

    In train mode batch statistics are used (biased variance) and the
    function returns ``(out, mean, var)`` so the caller can update running
    estimates. In eval mode ``running_mean``/``running_var`` are used and
    ``(out, None, None)`` is returned.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    axes, bshape = _channel_axes(x.ndim)
    f = x.shape[1]
    if gamma.shape != (f,) or beta.shape != (f,):
        raise ShapeError(f"gamma/beta shapes {gamma.shape}/{beta.shape} do not match {f} channels")
    count = x.size // f
    if train:
        if count < 2:
            raise DegenerateStateError("batch statistics need at least two values per channel")
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
    else:
        mean = np.asarray(running_mean, dtype=x.dtype)
        var = np.asarray(running_var, dtype=x.dtype)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean.reshape(bshape)) * inv.reshape(bshape)
    gb = gamma.data.reshape(bshape)
    out = gb * xhat + beta.data.reshape(bshape)

    def bw(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gb
        if train:
            dx = (inv.reshape(bshape) / count) * (
                count * dxhat
                - dxhat.sum(axis=axes).reshape(bshape)
                - xhat * (dxhat * xhat).sum(axis=axes).reshape(bshape)
            )
        else:
            dx = dxhat * inv.reshape(bshape)
        return dx, dgamma, dbeta

    result = _make(out, (x, gamma, beta), bw, "batch_norm")
    if train:
        return result, mean, var
    return result, None, None


# --------------------------------------------------------------------------
# losses


def softmax_cross_entropy(logits, labels):
    """Mean over the batch of ``-log softmax(logits)[label]``."""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"logits must be (n, k), got {logits.shape}")
    n, k = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise IndexError(f"labels must lie in [0, {k})")
    labels = labels.astype(np.intp)
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsumexp
    loss = -logp[np.arange(n), labels].mean()

    def bw(g):
        grad = np.exp(logp)
        grad[np.arange(n), labels] -= 1.0
        return (grad * (g / n),)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), bw, "softmax_cross_entropy")


def mse(pred, target):
    """Mean squared difference between two same-shaped tensors."""
    pred, target = as_tensor(pred), as_tensor(target, dtype=as_tensor(pred).dtype)
    if pred.shape != target.shape:
        raise ShapeError(f"mse operands differ: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    scale = 2.0 / diff.size

    def bw(g):
        return g * scale * diff, -g * scale * diff

    return _make(np.asarray((diff * diff).mean(), dtype=pred.dtype), (pred, target), bw, "mse")
