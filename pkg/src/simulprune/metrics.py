"""Parameter and FLOP accounting.

Formula sheet (per sample, one multiply-accumulate = 2 FLOPs)::

    layer       params                    flops
    conv2d      f*c*kh*kw (+f if bias)    2*f*c*kh*kw*h'*w'
    dense       out*in (+out if bias)     2*out*in
    batchnorm   2*f  (gamma, beta)        2*numel(output)
    scaling     f                         numel(output)
    relu        0                         numel(output)
    maxpool     0                         numel(input)
    flatten     0                         0

Bias additions are not counted as FLOPs. Batch-norm running statistics are
buffers, not parameters. Counts follow the declared architecture, so a
masked network counts its turned-off filters; compact it first to measure
the pruned size.
"""

import csv
from dataclasses import dataclass, field
from typing import List

import numpy as np

from .layers import Network, NetworkSpec

STATS_COLUMNS = ("layer", "params", "flops")


@dataclass
class LayerStats:
    layer: str
    kind: str
    params: int
    flops: int


@dataclass
class ModelStats:
    """Per-layer breakdown; the totals are always the sums of the entries."""

    per_layer: List[LayerStats] = field(default_factory=list)

    @property
    def params_total(self):
        return sum(s.params for s in self.per_layer)

    @property
    def flops_total(self):
        return sum(s.flops for s in self.per_layer)

    def rows(self):
        return [(s.layer, s.params, s.flops) for s in self.per_layer]


def _spec(model):
    return model.spec if isinstance(model, Network) else model


def _layer_stats(layer, in_shape, out_shape):
    numel_in, numel_out = int(np.prod(in_shape)), int(np.prod(out_shape))
    kind = layer.kind
    if kind == "conv2d":
        f, c = out_shape[0], in_shape[0]
        kh, kw = layer.kernel
        params = f * c * kh * kw + (f if layer.bias else 0)
        flops = 2 * f * c * kh * kw * out_shape[1] * out_shape[2]
    elif kind == "dense":
        out, inp = out_shape[0], numel_in
        params = out * inp + (out if layer.bias else 0)
        flops = 2 * out * inp
    elif kind == "batchnorm":
        params, flops = 2 * out_shape[0], 2 * numel_out
    elif kind == "scaling":
        params, flops = out_shape[0], numel_out
    elif kind == "relu":
        params, flops = 0, numel_out
    elif kind == "maxpool":
        params, flops = 0, numel_in
    else:
        params, flops = 0, 0
    return LayerStats(layer.name, kind, int(params), int(flops))


def model_stats(model, input_shape=None):
    """Parameter and FLOP counts of a :class:`Network` or :class:`NetworkSpec`.

    Parameters
    ----------
    model : Network or NetworkSpec
    input_shape : tuple of int, optional
        ``(c, h, w)`` or ``(d,)`` overriding the declared input shape.
    """
    spec = _spec(model)
    if input_shape is not None and tuple(input_shape) != tuple(spec.input_shape):
        spec = NetworkSpec(spec.layers, tuple(input_shape), spec.task)
    shapes = spec.infer_shapes()
    prev = tuple(spec.input_shape)
    stats = ModelStats()
    for layer, shape in zip(spec.layers, shapes):
        stats.per_layer.append(_layer_stats(layer, prev, shape))
        prev = shape
    return stats


def count_params(model):
    return model_stats(model).params_total


def count_flops(model, input_shape=None):
    return model_stats(model, input_shape).flops_total


def write_stats(path, stats):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(STATS_COLUMNS)
        writer.writerows(stats.rows())
