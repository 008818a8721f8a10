"""The integrated training objective.

    total = task + lambda1 * sum_{remained} |gamma|
                 - lambda2 * gamma_R
                 - lambda3 * sum_layers Div(remained filters)

``gamma_R`` is the share of scaling-factor mass held by remained filters and
``Div`` sums ``1 - |<w_i/|w_i|, w_j/|w_j|>|`` over ordered pairs of a layer's
remained filter vectors. With ``lambda2 = lambda3 = 0`` this is plain
L1-on-gamma slimming.
"""

import csv
import logging
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .exceptions import ContractError, DegenerateStateError
from .layers import input_keep
from .tensor import Tensor

logger = logging.getLogger(__name__)

NORM_EPS = 1e-12


@dataclass
class ObjectiveConfig:
    """Weights of the regularisation terms.

    ``Div`` is an unnormalised sum over filter pairs, so ``lambda3`` has to
    be scaled with layer width.
    """

    lambda1: float = 1e-4
    lambda2: float = 1e-4
    lambda3: float = 1e-6
    task: Optional[str] = None

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be nonnegative")


class ScalingState:
    """The set of scaling factors of a network and its remained/pruned partition.

    Parameters
    ----------
    gammas : list of Tensor
        One 1-d scaling vector per prunable unit (shared with the model).
    mask : array_like of bool, optional
        Flat mask over all filters, ``True`` for remained. Defaults to all.
    names : list of str, optional
        Layer name per unit, used in reports.
    """

    def __init__(self, gammas, mask=None, names=None):
        self.gammas = list(gammas)
        sizes = [g.shape[0] for g in self.gammas]
        self.offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
        n = int(self.offsets[-1])
        self.mask = np.ones(n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool).copy()
        if self.mask.shape != (n,):
            raise ContractError(f"mask length {self.mask.shape} != {n} scaling factors")
        self.layer_index = np.repeat(np.arange(len(sizes)), sizes)
        self.filter_index = np.concatenate([np.arange(s) for s in sizes]) if sizes else np.zeros(0, int)
        self.names = list(names) if names is not None else [f"unit{k}" for k in range(len(sizes))]

    @classmethod
    def from_model(cls, model):
        mask = np.concatenate(model.masks) if model.masks else None
        return cls(model.gamma_tensors(), mask, [u.name for u in model.units])

    @classmethod
    def from_values(cls, values, mask=None, sizes=None):
        """Standalone state over plain numbers, split into units of ``sizes``."""
        values = np.asarray(values, dtype=float)
        sizes = [values.size] if sizes is None else list(sizes)
        parts = np.split(values, np.cumsum(sizes)[:-1])
        return cls([Tensor(p, requires_grad=True) for p in parts], mask)

    def __len__(self):
        return int(self.offsets[-1])

    def values(self):
        """Current scaling factors as one flat array."""
        return np.concatenate([g.data for g in self.gammas])

    def unit_mask(self, k):
        return self.mask[self.offsets[k]:self.offsets[k + 1]]

    def unit_masks(self):
        return [self.unit_mask(k) for k in range(len(self.gammas))]

    @property
    def remained(self):
        return np.flatnonzero(self.mask)

    @property
    def pruned(self):
        return np.flatnonzero(~self.mask)


# --------------------------------------------------------------------------
# scaling-factor terms


def sparsity_term(state):
    """Sum of ``|gamma|`` over remained filters (subgradient 0 at 0)."""
    total = None
    for k, g in enumerate(state.gammas):
        keep = state.unit_mask(k).astype(g.dtype)
        part = T.sum_(T.mul(T.abs_(g), Tensor(keep, dtype=g.dtype)))
        total = part if total is None else T.add(total, part)
    return total


def _check_signs(values):
    if np.any(values < 0):
        warnings.warn("negative scaling factors present; ratio terms use magnitudes",
                      RuntimeWarning, stacklevel=3)


def pruning_ratio_terms(state):
    """Return ``(gamma_R, gamma_P)``.

    ``gamma_R`` is a differentiable scalar tensor: the share of scaling-factor
    magnitude held by remained filters. ``gamma_P = 1 - gamma_R`` is a float.
    Magnitudes are used because a turned-off gamma sits at exactly zero; with
    signed values the term would drive it negative and revive the channel.
    """
    values = state.values()
    if np.abs(values).sum() == 0:
        raise DegenerateStateError("all scaling factors are zero")
    _check_signs(values)
    num = den = None
    for k, g in enumerate(state.gammas):
        keep = Tensor(state.unit_mask(k).astype(g.dtype), dtype=g.dtype)
        mag = T.abs_(g)
        n_part = T.sum_(T.mul(mag, keep))
        d_part = T.sum_(mag)
        num = n_part if num is None else T.add(num, n_part)
        den = d_part if den is None else T.add(den, d_part)
    gamma_r = T.div(num, den)
    return gamma_r, 1.0 - gamma_r.item()


def pruned_share(values, mask):
    """``gamma_P`` as a float: pruned magnitude over total magnitude."""
    mags = np.abs(np.asarray(values, dtype=float))
    total = mags.sum()
    if total == 0:
        raise DegenerateStateError("all scaling factors are zero")
    return float(mags[~np.asarray(mask, dtype=bool)].sum() / total)


# --------------------------------------------------------------------------
# diversity


def pairwise_diversity(wi, wj):
    """``1 - |cos(wi, wj)|``; 0 for collinear vectors, 1 for orthogonal ones."""
    wi = np.asarray(wi, dtype=float).ravel()
    wj = np.asarray(wj, dtype=float).ravel()
    ni, nj = np.linalg.norm(wi), np.linalg.norm(wj)
    if ni <= NORM_EPS or nj <= NORM_EPS:
        raise DegenerateStateError("diversity undefined for a near-zero vector")
    c = abs(float(np.dot(wi / ni, wj / nj)))
    return 1.0 - min(c, 1.0)


def diversity_matrix(vectors):
    """N x N matrix of pairwise diversities with a zero diagonal (numpy only)."""
    w = np.asarray(vectors, dtype=float)
    norms = np.linalg.norm(w, axis=1)
    if np.any(norms <= NORM_EPS):
        raise DegenerateStateError("diversity undefined for a near-zero vector")
    wbar = w / norms[:, None]
    d = 1.0 - np.minimum(np.abs(wbar @ wbar.T), 1.0)
    np.fill_diagonal(d, 0.0)
    return d


def layer_diversity(weights, rows=None, cols=None, return_skipped=False):
    """Differentiable ``Div``: sum of all off-diagonal pairwise diversities.

    Parameters
    ----------
    weights : Tensor
        ``(N, d)`` matrix whose rows are filter vectors.
    rows, cols : array_like of int, optional
        Restrict to these filters and to these vector coordinates.
    return_skipped : bool
        Also return how many unordered pairs were skipped because one filter
        had a near-zero norm.
    """
    weights = T.as_tensor(weights)
    if weights.ndim != 2:
        raise ContractError(f"filter matrix must be 2-d, got {weights.shape}")
    rows = np.arange(weights.shape[0]) if rows is None else np.asarray(rows, dtype=int)
    cols = np.arange(weights.shape[1]) if cols is None else np.asarray(cols, dtype=int)
    sub = weights.data[np.ix_(rows, cols)]
    norms = np.linalg.norm(sub, axis=1)
    ok = norms > NORM_EPS
    n_all, n_ok = len(rows), int(ok.sum())
    skipped = n_all * (n_all - 1) // 2 - n_ok * (n_ok - 1) // 2
    if skipped:
        logger.warning("skipped %d filter pairs with near-zero norm", skipped)
    wbar = sub[ok] / norms[ok, None]
    corr = wbar @ wbar.T
    off = ~np.eye(n_ok, dtype=bool)
    value = float(np.sum(1.0 - np.abs(corr[off]))) if n_ok > 1 else 0.0
    keep_rows, nrm = rows[ok], norms[ok]

    def bw(g):
        a = -np.sign(corr)
        np.fill_diagonal(a, 0.0)
        gbar = 2.0 * (a @ wbar)
        proj = np.sum(gbar * wbar, axis=1, keepdims=True)
        gsub = (gbar - wbar * proj) / nrm[:, None]
        full = np.zeros_like(weights.data)
        full[np.ix_(keep_rows, cols)] = g * gsub
        return (full,)

    out = T._make(np.asarray(value, dtype=weights.dtype), (weights,), bw, "layer_diversity")
    return (out, skipped) if return_skipped else out


def unit_filter_matrix(model, k):
    """Filter vectors of unit ``k`` as rows (a differentiable view)."""
    w = model.unit_weights(k)
    if w.ndim == 4:
        return T.reshape(w, (w.shape[0], -1))
    return T.transpose(w)


def _unit_cols(model, k, keep):
    unit = model.units[k]
    kept = keep[unit.layer]
    w = model.unit_weights(k)
    if w.ndim == 4:
        block = w.shape[2] * w.shape[3]
        return (kept[:, None] * block + np.arange(block)).ravel()
    return kept


def diversity_term(model, state, return_skipped=False):
    """Sum of ``Div`` over every prunable unit, remained filters and live inputs only."""
    keep = input_keep(model.spec, state.unit_masks())
    total, skipped = None, 0
    for k in range(len(model.units)):
        rows = np.flatnonzero(state.unit_mask(k))
        d, s = layer_diversity(unit_filter_matrix(model, k), rows, _unit_cols(model, k, keep),
                               return_skipped=True)
        skipped += s
        total = d if total is None else T.add(total, d)
    return (total, skipped) if return_skipped else total


def mean_pairwise_diversity(model, state=None):
    """Average diversity over all unordered pairs of remained filters, pooled across units."""
    if state is None:
        state = ScalingState.from_model(model)
    keep = input_keep(model.spec, state.unit_masks())
    values = []
    for k in range(len(model.units)):
        rows = np.flatnonzero(state.unit_mask(k))
        if len(rows) < 2:
            continue
        w = unit_filter_matrix(model, k).data
        sub = w[np.ix_(rows, _unit_cols(model, k, keep))]
        sub = sub[np.linalg.norm(sub, axis=1) > NORM_EPS]
        if len(sub) < 2:
            continue
        d = diversity_matrix(sub)
        values.append(d[np.triu_indices(len(sub), 1)])
    if not values:
        return float("nan")
    return float(np.concatenate(values).mean())


# --------------------------------------------------------------------------
# total loss


@dataclass
class LossBreakdown:
    task: float
    sparsity: float
    pruning: float
    diversity: float
    gamma_R: float
    gamma_P: float
    diversity_sum: float
    total: float
    skipped_pairs: int = 0

    def components_sum(self):
        return self.task + self.sparsity + self.pruning + self.diversity


TRACE_COLUMNS = ("step", "task", "sparsity", "gamma_R", "gamma_P", "diversity_sum", "total")


def write_trace(path, breakdowns):
    """One CSV row per optimisation step."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_COLUMNS)
        for step, b in enumerate(breakdowns, start=1):
            writer.writerow([step, repr(b.task), repr(b.sparsity), repr(b.gamma_R),
                             repr(b.gamma_P), repr(b.diversity_sum), repr(b.total)])


def task_loss(model, output, y, task):
    if task == "classification":
        return T.softmax_cross_entropy(output, y)
    target = np.asarray(y, dtype=output.dtype)
    if output.shape != target.shape:
        output = T.reshape(output, target.shape)
    return T.mse(output, target)


def total_loss(model, X, y, state, cfg, mode="train"):
    """Scalar objective for one batch and its per-term breakdown.

    Masks must already be applied to ``model``. For reconstruction ``y`` may
    be ``None`` (the input is the target).
    """
    task = cfg.task or model.spec.task
    output = model.forward(X, mode)
    if task == "reconstruction" and y is None:
        y = X
    t_loss = task_loss(model, output, y, task)
    loss = t_loss

    sp = sparsity_term(state)
    sp_w = T.mul(sp, cfg.lambda1)
    loss = T.add(loss, sp_w)

    values = state.values()
    try:
        gamma_p = pruned_share(values, state.mask)
    except DegenerateStateError:
        if cfg.lambda2 > 0:
            raise
        gamma_p = float("nan")
    if cfg.lambda2 > 0:
        gamma_r, gamma_p = pruning_ratio_terms(state)
        pr_w = T.mul(gamma_r, -cfg.lambda2)
        loss = T.add(loss, pr_w)
        pruning = pr_w.item()
    else:
        pruning = 0.0

    div, skipped = diversity_term(model, state, return_skipped=True)
    if cfg.lambda3 > 0:
        dv_w = T.mul(div, -cfg.lambda3)
        loss = T.add(loss, dv_w)
        diversity = dv_w.item()
    else:
        diversity = 0.0

    breakdown = LossBreakdown(
        task=t_loss.item(), sparsity=sp_w.item(), pruning=pruning, diversity=diversity,
        gamma_R=1.0 - gamma_p, gamma_P=gamma_p, diversity_sum=div.item(),
        total=loss.item(), skipped_pairs=skipped,
    )
    return loss, breakdown
