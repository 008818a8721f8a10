"""Layer primitives, architecture descriptions and the network container.

Every hidden ``dense``/``conv2d`` layer must be followed directly by a
scaling host: either ``batchnorm`` (its ``gamma`` is the per-filter scaling
factor) or a standalone ``scaling`` layer. The last parametric layer produces
the network output and is never pruned, so it must not have a host.
"""

import copy
import re
from dataclasses import dataclass, asdict
from typing import List, Optional, Tuple

import numpy as np

from . import tensor as T
from .exceptions import ShapeError, SpecError
from .tensor import Tensor

KINDS = ("dense", "conv2d", "batchnorm", "scaling", "relu", "maxpool", "flatten")
PARAMETRIC = ("dense", "conv2d")
HOSTS = ("batchnorm", "scaling")
TASKS = ("classification", "reconstruction")


@dataclass
class LayerConfig:
    kind: str
    out_filters: Optional[int] = None
    kernel: Tuple[int, int] = (3, 3)
    stride: int = 1
    pad: int = 0
    bias: bool = False
    pool: int = 2
    name: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SpecError(f"unknown layer kind {self.kind!r}")
        self.kernel = tuple(int(k) for k in self.kernel)
        if self.kind in PARAMETRIC and (self.out_filters is None or self.out_filters < 1):
            raise SpecError(f"{self.kind} layer needs a positive out_filters")

    @property
    def is_host(self):
        return self.kind in HOSTS


@dataclass
class PrunableUnit:
    """A dense/conv layer together with the layer hosting its scaling factors."""

    layer: int
    host: int
    filters: int
    name: str
    host_kind: str


@dataclass
class NetworkSpec:
    """Ordered layer list plus the per-sample input shape and the task kind."""

    layers: List[LayerConfig]
    input_shape: Tuple[int, ...]
    task: str = "classification"

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self.layers = [l if isinstance(l, LayerConfig) else LayerConfig(**l) for l in self.layers]
        counts = {}
        for layer in self.layers:
            if not layer.name:
                idx = counts.get(layer.kind, 0)
                layer.name = f"{layer.kind}{idx}"
            counts[layer.kind] = counts.get(layer.kind, 0) + 1
        if self.task not in TASKS:
            raise SpecError(f"unknown task {self.task!r}")
        self.validate()

    # ------------------------------------------------------------------
    @classmethod
    def from_string(cls, text, input_shape, task="classification"):
        """Parse a compact description such as ``"conv16 bn relu pool flatten dense4"``.

        Tokens: ``conv<F>`` (options ``k<K>``, ``s<S>``, ``p<P>``; default
        3x3, stride 1, "same" padding), ``dense<F>``, ``bn``, ``scale``,
        ``relu``, ``pool[<K>]``, ``flatten``. Append ``+b`` / ``-b`` to a
        conv or dense token to force a bias on or off.
        """
        layers = []
        for tok in text.replace(",", " ").split():
            bias = None
            if tok.endswith("+b") or tok.endswith("-b"):
                bias = tok.endswith("+b")
                tok = tok[:-2]
            m = re.fullmatch(r"conv(\d+)((?:[ksp]\d+)*)", tok)
            if m:
                opts = dict(re.findall(r"([ksp])(\d+)", m.group(2)))
                k = int(opts.get("k", 3))
                layers.append(LayerConfig(
                    "conv2d", out_filters=int(m.group(1)), kernel=(k, k),
                    stride=int(opts.get("s", 1)), pad=int(opts.get("p", k // 2)),
                    bias=bool(bias) if bias is not None else False,
                ))
                continue
            m = re.fullmatch(r"dense(\d+)", tok)
            if m:
                layers.append(LayerConfig("dense", out_filters=int(m.group(1)),
                                          bias=True if bias is None else bias))
                continue
            m = re.fullmatch(r"pool(\d*)", tok)
            if m:
                layers.append(LayerConfig("maxpool", pool=int(m.group(1) or 2)))
                continue
            simple = {"bn": "batchnorm", "scale": "scaling", "relu": "relu", "flatten": "flatten"}
            if tok in simple:
                layers.append(LayerConfig(simple[tok]))
                continue
            raise SpecError(f"cannot parse layer token {tok!r}")
        return cls(layers, input_shape, task)

    # ------------------------------------------------------------------
    def infer_shapes(self):
        """Per-layer output shapes (without the batch axis)."""
        shape = self.input_shape
        shapes = []
        for layer in self.layers:
            shape = _infer(layer, shape)
            shapes.append(shape)
        return shapes

    def parametric_indices(self):
        return [i for i, l in enumerate(self.layers) if l.kind in PARAMETRIC]

    def prunable_units(self):
        param = self.parametric_indices()
        units = []
        for i in param:
            j = i + 1
            if j < len(self.layers) and self.layers[j].is_host:
                units.append(PrunableUnit(i, j, self.layers[i].out_filters,
                                          self.layers[i].name, self.layers[j].kind))
        return units

    def validate(self):
        if not self.layers:
            raise SpecError("network has no layers")
        shapes = self.infer_shapes()
        param = self.parametric_indices()
        if not param:
            raise SpecError("network has no dense or conv layer")
        hosted = {u.layer for u in self.prunable_units()}
        for i in param[:-1]:
            if i not in hosted:
                raise SpecError(f"layer {self.layers[i].name!r} is not followed by a scaling host")
        if param[-1] in hosted:
            raise SpecError(f"output layer {self.layers[param[-1]].name!r} must not have a scaling host")
        for i, layer in enumerate(self.layers):
            if layer.is_host and (i == 0 or self.layers[i - 1].kind not in PARAMETRIC):
                raise SpecError(f"{layer.kind} layer {layer.name!r} does not follow a dense/conv layer")
        if not hosted:
            raise SpecError("network has no prunable layer")
        if self.task == "classification" and len(shapes[-1]) != 1:
            raise SpecError(f"classification output must be 1-d, got {shapes[-1]}")
        return shapes

    @property
    def output_shape(self):
        return self.infer_shapes()[-1]

    def to_dict(self):
        return {"input_shape": list(self.input_shape), "task": self.task,
                "layers": [asdict(l) for l in self.layers]}

    @classmethod
    def from_dict(cls, d):
        return cls([LayerConfig(**{**l, "kernel": tuple(l["kernel"])}) for l in d["layers"]],
                   tuple(d["input_shape"]), d.get("task", "classification"))


def _infer(layer, shape):
    kind = layer.kind
    if kind == "conv2d":
        if len(shape) != 3:
            raise SpecError(f"conv2d {layer.name!r} needs (c, h, w) input, got {shape}")
        c, h, w = shape
        kh, kw = layer.kernel
        if h + 2 * layer.pad < kh or w + 2 * layer.pad < kw or layer.stride < 1:
            raise SpecError(f"conv2d {layer.name!r}: kernel does not fit input {shape}")
        return (layer.out_filters, (h + 2 * layer.pad - kh) // layer.stride + 1,
                (w + 2 * layer.pad - kw) // layer.stride + 1)
    if kind == "dense":
        if len(shape) != 1:
            raise SpecError(f"dense {layer.name!r} needs flat input, got {shape}")
        return (layer.out_filters,)
    if kind == "maxpool":
        if len(shape) != 3 or shape[1] < layer.pool or shape[2] < layer.pool:
            raise SpecError(f"maxpool {layer.name!r} cannot pool {shape}")
        return (shape[0], shape[1] // layer.pool, shape[2] // layer.pool)
    if kind == "flatten":
        return (int(np.prod(shape)),)
    return shape


# --------------------------------------------------------------------------
# batch norm / scaling


@dataclass
class BatchNormState:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1

    @classmethod
    def create(cls, filters, gamma_init=0.5, dtype=np.float64, eps=1e-5, momentum=0.1):
        return cls(
            gamma=Tensor(np.full(filters, gamma_init), requires_grad=True, dtype=dtype),
            beta=Tensor(np.zeros(filters), requires_grad=True, dtype=dtype),
            running_mean=np.zeros(filters, dtype=dtype),
            running_var=np.ones(filters, dtype=dtype),
            eps=eps, momentum=momentum,
        )


def batchnorm_forward(z_in, state, mode="train"):
    """Apply ``gamma * (z - mu) / sqrt(var + eps) + beta`` per filter.

    Train mode normalises with batch statistics and updates the running
    estimates in ``state`` (unbiased variance, exponential moving average);
    eval mode uses the running estimates.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    train = mode == "train"
    out, mean, var = T.batch_norm(z_in, state.gamma, state.beta, state.running_mean,
                                  state.running_var, eps=state.eps, train=train)
    if train:
        count = z_in.size // z_in.shape[1]
        m = state.momentum
        state.running_mean = (1.0 - m) * state.running_mean + m * mean
        state.running_var = (1.0 - m) * state.running_var + m * var * count / (count - 1)
    return out


def scaling_forward(z_in, gamma):
    """Channel-wise multiplication by a standalone scaling vector."""
    return T.scale_channels(z_in, gamma)


# --------------------------------------------------------------------------
# network container


def _layer_seed(seed, index):
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


class Network:
    """Parameters, buffers and masks for a :class:`NetworkSpec`.

    Attributes
    ----------
    spec : NetworkSpec
    params : dict of str -> Tensor
        Trainable leaves keyed ``"<layer name>.<weight|bias|gamma|beta>"``.
    bn : dict of int -> BatchNormState
        Batch-norm state keyed by layer index.
    masks : list of ndarray of bool
        One mask per prunable unit; ``True`` means the filter is remained.
    """

    def __init__(self, spec, params, bn, masks=None, dtype=np.float64):
        self.spec = spec
        self.params = params
        self.bn = bn
        self.dtype = np.dtype(dtype)
        self.units = spec.prunable_units()
        if masks is None:
            masks = [np.ones(u.filters, dtype=bool) for u in self.units]
        self.masks = [np.asarray(m, dtype=bool) for m in masks]

    @classmethod
    def build(cls, spec, seed=0, bn_gamma_init=0.5, scaling_gamma_init=1.0, dtype=np.float64):
        """He-initialise weights; BN-hosted gammas start at 0.5 and standalone scaling gammas at 1.0."""
        spec.validate()
        shapes = [spec.input_shape] + spec.infer_shapes()
        params = {}
        bn = {}
        for i, layer in enumerate(spec.layers):
            in_shape = shapes[i]
            if layer.kind == "conv2d":
                c = in_shape[0]
                kh, kw = layer.kernel
                params[f"{layer.name}.weight"] = T.he_init(
                    (layer.out_filters, c, kh, kw), c * kh * kw, _layer_seed(seed, i), dtype)
            elif layer.kind == "dense":
                params[f"{layer.name}.weight"] = T.he_init(
                    (in_shape[0], layer.out_filters), in_shape[0], _layer_seed(seed, i), dtype)
            elif layer.kind == "batchnorm":
                state = BatchNormState.create(in_shape[0], bn_gamma_init, dtype)
                bn[i] = state
                params[f"{layer.name}.gamma"] = state.gamma
                params[f"{layer.name}.beta"] = state.beta
            elif layer.kind == "scaling":
                params[f"{layer.name}.gamma"] = Tensor(
                    np.full(in_shape[0], scaling_gamma_init), requires_grad=True, dtype=dtype)
            if layer.kind in PARAMETRIC and layer.bias:
                params[f"{layer.name}.bias"] = Tensor(np.zeros(layer.out_filters),
                                                      requires_grad=True, dtype=dtype)
        return cls(spec, params, bn, dtype=dtype)

    # ------------------------------------------------------------------
    def forward(self, x, mode="eval", upto=None):
        """Run a batch through the layers in order (only the first ``upto`` if given)."""
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x), dtype=self.dtype)
        expected = self.spec.input_shape
        if tuple(x.shape[1:]) != expected:
            raise ShapeError(f"expected input (n, {', '.join(map(str, expected))}), got {x.shape}")
        for i, layer in enumerate(self.spec.layers[:upto]):
            kind = layer.kind
            if kind == "conv2d":
                x = T.conv2d(x, self.params[f"{layer.name}.weight"], layer.stride, layer.pad)
                if layer.bias:
                    x = T.bias_add(x, self.params[f"{layer.name}.bias"])
            elif kind == "dense":
                x = T.matmul(x, self.params[f"{layer.name}.weight"])
                if layer.bias:
                    x = T.bias_add(x, self.params[f"{layer.name}.bias"])
            elif kind == "batchnorm":
                x = batchnorm_forward(x, self.bn[i], mode)
            elif kind == "scaling":
                x = scaling_forward(x, self.params[f"{layer.name}.gamma"])
            elif kind == "relu":
                x = T.relu(x)
            elif kind == "maxpool":
                x = T.maxpool2d(x, layer.pool)
            elif kind == "flatten":
                x = T.flatten(x)
        return x

    __call__ = forward

    # ------------------------------------------------------------------
    def gamma_tensors(self):
        """The scaling-factor vector of every prunable unit, in unit order."""
        return [self.params[f"{self.spec.layers[u.host].name}.gamma"] for u in self.units]

    def beta_tensors(self):
        """BN offsets per unit (``None`` for standalone scaling hosts)."""
        return [self.params.get(f"{self.spec.layers[u.host].name}.beta") for u in self.units]

    def unit_weights(self, k):
        return self.params[f"{self.spec.layers[self.units[k].layer].name}.weight"]

    def named_parameters(self):
        return list(self.params.items())

    def decayed(self, name):
        """Weight decay applies to weights and biases, never to gamma or beta."""
        return name.endswith(".weight") or name.endswith(".bias")

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def n_filters(self):
        return sum(u.filters for u in self.units)

    def copy(self):
        return copy.deepcopy(self)

    def __repr__(self):
        body = " ".join(l.name for l in self.spec.layers)
        return f"Network({body}; input={self.spec.input_shape})"


def input_keep(spec, masks):
    """Surviving input indices of every parametric layer given per-unit masks.

    Returns a dict layer index -> ndarray of kept input indices (channels for
    conv, features for dense). Channels silenced by an upstream mask are
    dropped; ``flatten`` expands a channel mask to its spatial block.
    """
    units = {u.layer: k for k, u in enumerate(spec.prunable_units())}
    shapes = [spec.input_shape] + spec.infer_shapes()
    alive = np.ones(spec.input_shape[0], dtype=bool)
    keep = {}
    for i, layer in enumerate(spec.layers):
        if layer.kind in PARAMETRIC:
            keep[i] = np.flatnonzero(alive)
            if i in units:
                alive = np.asarray(masks[units[i]], dtype=bool).copy()
            else:
                alive = np.ones(layer.out_filters, dtype=bool)
        elif layer.kind == "flatten":
            in_shape = shapes[i]
            spatial = int(np.prod(in_shape[1:])) if len(in_shape) > 1 else 1
            alive = np.repeat(alive, spatial)
    return keep
