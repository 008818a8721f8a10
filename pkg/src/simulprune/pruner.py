"""Online architecture selection: ratio schedule, global partition, masking, compaction."""

import csv
import math
from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np

from .exceptions import CompactionError, ContractError, DegenerateStateError
from .layers import Network, NetworkSpec, LayerConfig, input_keep
from .objective import ScalingState, pruned_share
from .tensor import Tensor

# absorbs representation error in ratio * n, e.g. 0.29 * 100 = 28.999999999999996
_COUNT_SLACK = 1e-9


@dataclass
class PruneSchedule:
    """Linear pruning-ratio ramp from ``start_ratio`` at epoch 1 to ``target_ratio`` at epoch ``epochs``."""

    target_ratio: float
    epochs: int
    start_ratio: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.target_ratio < 1.0:
            raise ContractError(f"target_ratio must be in [0, 1), got {self.target_ratio}")
        if self.epochs < 1:
            raise ContractError(f"epochs must be positive, got {self.epochs}")
        if not 0.0 <= self.start_ratio <= self.target_ratio:
            raise ContractError("start_ratio must lie in [0, target_ratio]")

    def ratio_at(self, n):
        return ratio_at_epoch(self, n)


def ratio_at_epoch(schedule, n):
    if not 1 <= n <= schedule.epochs:
        raise ContractError(f"epoch {n} outside 1..{schedule.epochs}")
    if schedule.epochs == 1:
        return schedule.target_ratio
    span = schedule.target_ratio - schedule.start_ratio
    return schedule.start_ratio + span * (n - 1) / (schedule.epochs - 1)


def prune_count(ratio, n):
    if not 0.0 <= ratio < 1.0:
        raise ContractError(f"ratio must be in [0, 1), got {ratio}")
    return int(math.floor(ratio * n + _COUNT_SLACK))


def partition(state, ratio, min_per_unit=0):
    """Split filter indices into ``(pruned, remained)`` by a global percentile of ``|gamma|``.

    Exactly ``floor(ratio * |Gamma|)`` indices are pruned, smallest ``|gamma|``
    first, ties broken by the lower flat index. With ``min_per_unit > 0`` a
    filter is passed over when pruning it would leave its unit with fewer
    survivors; the next-smallest candidate is taken instead.

    Parameters
    ----------
    state : ScalingState or array_like
        Scaling factors; a plain array is treated as a single unit.
    ratio : float
        Fraction in ``[0, 1)``.
    min_per_unit : int, default=0

    Returns
    -------
    pruned, remained : ndarray of int
        Sorted flat indices.
    """
    if isinstance(state, ScalingState):
        values, units, sizes = state.values(), state.layer_index, np.diff(state.offsets)
    else:
        values = np.asarray(state, dtype=float)
        units, sizes = np.zeros(values.size, dtype=int), np.array([values.size])
    n = values.size
    count = prune_count(ratio, n)
    order = np.argsort(np.abs(values), kind="stable")
    if min_per_unit <= 0:
        pruned = order[:count]
    else:
        if count > n - min_per_unit * len(sizes):
            raise ContractError("survivor floor cannot be met at this ratio")
        left = sizes.astype(int).copy()
        picked = []
        for idx in order:
            if len(picked) == count:
                break
            u = units[idx]
            if left[u] > min_per_unit:
                picked.append(idx)
                left[u] -= 1
        pruned = np.array(picked, dtype=int)
    pruned = np.sort(pruned)
    remained = np.setdiff1d(np.arange(n), pruned)
    return pruned, remained


def apply_mask(model, state, pruned):
    """Turn off ``pruned`` filters and mark every other filter as remained.

    Pruned gammas (and BN betas) are set to exactly zero so the channel is
    silent; filters no longer in ``pruned`` are unmasked and keep whatever
    value their gamma has regrown to.
    """
    pruned = np.asarray(pruned, dtype=int)
    mask = np.ones(len(state), dtype=bool)
    mask[pruned] = False
    state.mask = mask
    betas = model.beta_tensors()
    for k, gamma in enumerate(state.gammas):
        off = state.unit_mask(k)
        gamma.data[~off] = 0.0
        if k < len(betas) and betas[k] is not None:
            betas[k].data[~off] = 0.0
    model.masks = [m.copy() for m in state.unit_masks()]


# --------------------------------------------------------------------------
# compaction


@dataclass
class CompactionPlan:
    keep_filters: Dict[int, np.ndarray]
    keep_inputs: Dict[int, np.ndarray]

    def survivors(self):
        return {i: len(k) for i, k in self.keep_filters.items()}


def plan_compaction(model, state=None):
    """Surviving output filters of each prunable layer and input slices of every consumer."""
    masks = state.unit_masks() if state is not None else model.masks
    keep_filters = {}
    for unit, m in zip(model.units, masks):
        kept = np.flatnonzero(m)
        if kept.size == 0:
            raise CompactionError(unit.name)
        keep_filters[unit.layer] = kept
    return CompactionPlan(keep_filters, input_keep(model.spec, masks))


def compact(model, plan):
    """Build the narrower network implied by ``plan`` and copy surviving weight slices."""
    for layer_idx, kept in plan.keep_filters.items():
        if len(kept) == 0:
            raise CompactionError(model.spec.layers[layer_idx].name)
    spec = model.spec
    layers = []
    for i, layer in enumerate(spec.layers):
        out = layer.out_filters
        if i in plan.keep_filters:
            out = int(len(plan.keep_filters[i]))
        layers.append(LayerConfig(layer.kind, out, layer.kernel, layer.stride, layer.pad,
                                  layer.bias, layer.pool, layer.name))
    new_spec = NetworkSpec(layers, spec.input_shape, spec.task)

    params, bn = {}, {}
    host_of = {u.host: u.layer for u in model.units}
    for i, layer in enumerate(spec.layers):
        name = layer.name
        out_keep = plan.keep_filters.get(i)
        if layer.kind == "conv2d":
            w = model.params[f"{name}.weight"].data
            w = w[:, plan.keep_inputs[i]]
            if out_keep is not None:
                w = w[out_keep]
            params[f"{name}.weight"] = Tensor(w, requires_grad=True, dtype=w.dtype)
        elif layer.kind == "dense":
            w = model.params[f"{name}.weight"].data
            w = w[plan.keep_inputs[i]]
            if out_keep is not None:
                w = w[:, out_keep]
            params[f"{name}.weight"] = Tensor(w, requires_grad=True, dtype=w.dtype)
        if layer.kind in ("conv2d", "dense") and layer.bias:
            b = model.params[f"{name}.bias"].data
            b = b if out_keep is None else b[out_keep]
            params[f"{name}.bias"] = Tensor(b, requires_grad=True, dtype=b.dtype)
        if layer.kind in ("batchnorm", "scaling"):
            keep = plan.keep_filters[host_of[i]]
            gamma = model.params[f"{name}.gamma"].data[keep]
            params[f"{name}.gamma"] = Tensor(gamma, requires_grad=True, dtype=gamma.dtype)
            if layer.kind == "batchnorm":
                old = model.bn[i]
                beta = old.beta.data[keep]
                params[f"{name}.beta"] = Tensor(beta, requires_grad=True, dtype=beta.dtype)
                bn[i] = type(old)(params[f"{name}.gamma"], params[f"{name}.beta"],
                                  old.running_mean[keep].copy(), old.running_var[keep].copy(),
                                  old.eps, old.momentum)
    return Network(new_spec, params, bn, dtype=model.dtype)


# --------------------------------------------------------------------------
# reports


@dataclass
class PruneReport:
    epoch: int
    ratio: float
    layers: List[str]
    survivors: List[int]
    totals: List[int]
    sorted_gammas: np.ndarray
    gamma_P: float
    gamma_R: float
    ranked: List[tuple] = field(default_factory=list)

    def layer_rows(self):
        return [(self.epoch, self.ratio, name, s, t)
                for name, s, t in zip(self.layers, self.survivors, self.totals)]


def prune_report(state, model=None, epoch=0, ratio=0.0, mask=None):
    """Survivor counts per layer, sorted ``|gamma|`` and ``gamma_P``/``gamma_R``.

    ``mask`` defaults to the state's mask. Pass the freshly computed
    partition before calling :func:`apply_mask` to get the pre-mask
    ``gamma_P`` (after masking the pruned mass is zero by construction).
    """
    values = state.values()
    mask = state.mask if mask is None else np.asarray(mask, dtype=bool)
    names = [u.name for u in model.units] if model is not None else state.names
    survivors, totals = [], []
    for k in range(len(state.gammas)):
        m = mask[state.offsets[k]:state.offsets[k + 1]]
        survivors.append(int(m.sum()))
        totals.append(int(m.size))
    try:
        gp = pruned_share(values, mask)
    except DegenerateStateError:
        gp = float("nan")
    mags = np.abs(values)
    order = np.argsort(-mags, kind="stable")
    ranked = [(r + 1, names[state.layer_index[i]], int(state.filter_index[i]), float(mags[i]))
              for r, i in enumerate(order)]
    return PruneReport(epoch, ratio, names, survivors, totals, mags[order], gp, 1.0 - gp, ranked)


PRUNE_COLUMNS = ("epoch", "ratio", "layer", "survivors", "total")
GAMMA_COLUMNS = ("rank", "layer", "filter", "gamma_abs")


def write_prune_report(path, reports):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(PRUNE_COLUMNS)
        for rep in reports:
            for row in rep.layer_rows():
                writer.writerow(row)


def write_sorted_gammas(path, report):
    """Ranked ``|gamma|``, largest first (one row per scaling factor)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(GAMMA_COLUMNS)
        for rank, layer, filt, mag in report.ranked:
            writer.writerow([rank, layer, filt, repr(mag)])
