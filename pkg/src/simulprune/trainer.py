"""Online pruning training loop.

Each epoch: compute the scheduled ratio, partition all scaling factors by a
global percentile, turn off the pruned filters, then run minibatch updates
on the integrated objective. After the last epoch the network is partitioned
once more at the target ratio and compacted without any fine-tuning.
"""

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from . import tensor as T
from .data import AugmentConfig, BatchIterator, augment
from .exceptions import CompactionError, ContractError, NumericError
from .objective import ScalingState, total_loss
from .pruner import apply_mask, compact, partition, plan_compaction, prune_report

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    """Optimiser and loop settings; defaults suit 160-epoch Nesterov SGD training."""

    optimizer: str = "sgd_nesterov"
    lr: float = 0.1
    lr_drops: Tuple[Tuple[float, float], ...] = ((0.5, 0.1), (0.75, 0.1))
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 64
    epochs: int = 160
    seed: int = 0
    determinism: bool = True
    betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    freeze_pruned: bool = False
    survivor_floor: int = 1
    augment: Optional[AugmentConfig] = None
    trace: bool = False

    def __post_init__(self):
        if self.optimizer not in ("sgd_nesterov", "adam"):
            raise ContractError(f"unknown optimizer {self.optimizer!r}")
        self.lr_drops = tuple((float(f), float(m)) for f, m in self.lr_drops)
        fracs = [f for f, _ in self.lr_drops]
        if any(not 0.0 < f < 1.0 for f in fracs) or any(b <= a for a, b in zip(fracs, fracs[1:])):
            raise ContractError("lr_drops fractions must be strictly increasing in (0, 1)")
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ContractError("lr, batch_size and epochs must be positive")


def lr_at(cfg, epoch):
    """Piecewise-constant rate; a drop at fraction ``f`` takes effect at epoch ``floor(f * N) + 1``."""
    if not 1 <= epoch <= cfg.epochs:
        raise ContractError(f"epoch {epoch} outside 1..{cfg.epochs}")
    lr = cfg.lr
    for frac, factor in cfg.lr_drops:
        if epoch >= math.floor(frac * cfg.epochs) + 1:
            lr *= factor
    return lr


# --------------------------------------------------------------------------
# optimisers


def _check_grads(grads):
    for g in grads:
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient; step aborted")


def sgd_nesterov_step(params, grads, velocities, lr, momentum=0.9, weight_decay=0.0):
    """In-place Nesterov SGD without dampening.

    ``g = grad + weight_decay * p``; ``v = momentum * v + g``;
    ``p -= lr * (g + momentum * v)``. ``weight_decay`` may be a per-parameter list.
    """
    _check_grads(grads)
    decays = weight_decay if isinstance(weight_decay, (list, tuple)) else [weight_decay] * len(params)
    for p, g, v, wd in zip(params, grads, velocities, decays):
        if g is None:
            continue
        if wd:
            g = g + wd * p
        v *= momentum
        v += g
        p -= lr * (g + momentum * v)


def adam_step(params, grads, first, second, t, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
    """In-place bias-corrected Adam; ``t`` is the 1-based step count."""
    _check_grads(grads)
    b1, b2 = betas
    decays = weight_decay if isinstance(weight_decay, (list, tuple)) else [weight_decay] * len(params)
    for p, g, m, v, wd in zip(params, grads, first, second, decays):
        if g is None:
            continue
        if wd:
            g = g + wd * p
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        p -= lr * mhat / (np.sqrt(vhat) + eps)


class Optimizer:
    """Holds per-parameter buffers for one of the two supported update rules."""

    def __init__(self, cfg, names):
        self.cfg = cfg
        self.names = list(names)
        self.t = 0
        self.buffers = {}

    def _buf(self, key, name, like):
        d = self.buffers.setdefault(key, {})
        if name not in d:
            d[name] = np.zeros_like(like)
        return d[name]

    def step(self, model, lr):
        names = [n for n in self.names if model.params[n].grad is not None]
        params = [model.params[n].data for n in names]
        grads = [model.params[n].grad for n in names]
        decays = [self.cfg.weight_decay if model.decayed(n) else 0.0 for n in names]
        if self.cfg.optimizer == "sgd_nesterov":
            vel = [self._buf("v", n, p) for n, p in zip(names, params)]
            sgd_nesterov_step(params, grads, vel, lr, self.cfg.momentum, decays)
        else:
            self.t += 1
            m = [self._buf("m", n, p) for n, p in zip(names, params)]
            v = [self._buf("v", n, p) for n, p in zip(names, params)]
            adam_step(params, grads, m, v, self.t, lr, self.cfg.betas, self.cfg.adam_eps, decays)

    def reset_entries(self, name, index):
        """Zero the buffers of selected entries (used when a filter is turned off)."""
        for d in self.buffers.values():
            if name in d:
                d[name][index] = 0.0


# --------------------------------------------------------------------------
# evaluation


def predict_batches(model, images, batch_size=256):
    outs = []
    for start in range(0, len(images), batch_size):
        outs.append(model.forward(images[start:start + batch_size], "eval").data)
    return np.concatenate(outs)


def psnr(pred, target):
    target = np.asarray(target, dtype=float)
    pred = np.asarray(pred, dtype=float).reshape(target.shape)
    err = np.mean((pred - target) ** 2)
    peak = target.max() - target.min()
    if err == 0:
        return float("inf")
    return float(10.0 * np.log10(peak ** 2 / err))


def evaluate(model, dataset, batch_size=256):
    """Accuracy for classification, PSNR (dB) for reconstruction, eval-mode BN."""
    out = predict_batches(model, dataset.images, batch_size)
    if model.spec.task == "classification":
        return float(np.mean(out.argmax(axis=1) == dataset.labels))
    return psnr(out, dataset.y)


# --------------------------------------------------------------------------
# fit


@dataclass
class EpochLog:
    epoch: int
    task: float
    sparsity: float
    gamma_R: float
    gamma_P: float
    diversity: float
    total: float
    acc: float
    ratio: float
    lr: float = 0.0
    survivors: List[int] = field(default_factory=list)


EPOCH_COLUMNS = ("epoch", "task", "sparsity", "gamma_R", "gamma_P", "diversity", "total", "acc", "ratio")


def write_epoch_log(path, logs):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(EPOCH_COLUMNS)
        for log in logs:
            writer.writerow([log.epoch] + [repr(float(getattr(log, c))) for c in EPOCH_COLUMNS[1:]])


@dataclass
class FitResult:
    """Outputs of :func:`fit`.

    ``model`` is the compacted network (``None`` if compaction failed),
    ``masked_model`` the full-width network with the final mask applied.
    ``reports`` hold the pre-mask partition of every epoch, ``snapshots``
    the scaling factors at the end of every epoch, and ``final_report`` the
    pre-mask partition used for compaction.
    """

    model: object
    masked_model: object
    logs: List[EpochLog]
    reports: list
    snapshots: list
    final_report: object
    trace: list = field(default_factory=list)

    @property
    def final_gamma_P(self):
        return self.final_report.gamma_P


def _host_param_names(model):
    names = []
    for u in model.units:
        host = model.spec.layers[u.host].name
        names.append((f"{host}.gamma", f"{host}.beta" if u.host_kind == "batchnorm" else None))
    return names


def _prune_step(model, state, ratio, floor, optimizer, epoch, reset_buffers=True):
    pruned, _ = partition(state, ratio, min_per_unit=floor)
    mask = np.ones(len(state), dtype=bool)
    mask[pruned] = False
    report = prune_report(state, model, epoch, ratio, mask=mask)
    newly = mask.copy()
    newly[:] = False
    newly[pruned] = state.mask[pruned]
    if optimizer is not None and reset_buffers and newly.any():
        for k, (g_name, b_name) in enumerate(_host_param_names(model)):
            idx = newly[state.offsets[k]:state.offsets[k + 1]]
            optimizer.reset_entries(g_name, idx)
            if b_name:
                optimizer.reset_entries(b_name, idx)
    apply_mask(model, state, pruned)
    return report


def fit(model, train, objective, schedule, cfg, eval_data=None, callback=None):
    """Train ``model`` in place with online pruning and return a :class:`FitResult`.

    Parameters
    ----------
    model : Network
    train : Dataset
    objective : ObjectiveConfig
    schedule : PruneSchedule
        ``schedule.epochs`` must equal ``cfg.epochs``.
    cfg : TrainConfig
    eval_data : Dataset, optional
        Evaluated after every epoch on the masked network (train data if omitted).
    callback : callable, optional
        Called as ``callback(epoch_log)`` after each epoch.

    Raises
    ------
    CompactionError
        If the final mask empties a layer; ``exc.result`` carries the
        :class:`FitResult` with the masked model.
    """
    if schedule.epochs != cfg.epochs:
        raise ContractError(f"schedule has {schedule.epochs} epochs, train config {cfg.epochs}")
    if eval_data is None:
        eval_data = train
    with T.deterministic(cfg.determinism):
        return _fit(model, train, objective, schedule, cfg, eval_data, callback)


def _fit(model, train, objective, schedule, cfg, eval_data, callback):
    optimizer = Optimizer(cfg, [n for n, _ in model.named_parameters()])
    batches = BatchIterator(len(train), cfg.batch_size, cfg.seed)
    aug_rng = np.random.default_rng([cfg.seed, 1])
    y_all = train.labels
    task = objective.task or model.spec.task
    host_names = _host_param_names(model)

    logs, reports, snapshots, trace = [], [], [], []
    for epoch in range(1, cfg.epochs + 1):
        ratio = schedule.ratio_at(epoch)
        state = ScalingState.from_model(model)
        reports.append(_prune_step(model, state, ratio, cfg.survivor_floor, optimizer, epoch))
        lr = lr_at(cfg, epoch)

        sums = np.zeros(5)
        steps = 0
        for idx in batches.epoch(epoch):
            xb = train.images[idx]
            if cfg.augment is not None:
                xb = augment(xb, cfg.augment, aug_rng)
            if task == "classification":
                yb = y_all[idx]
            else:
                yb = xb if train.targets is None or cfg.augment is not None else train.targets[idx]
            loss, parts = total_loss(model, xb, yb, state, objective)
            model.zero_grad()
            loss.backward()
            if cfg.freeze_pruned:
                for k, (g_name, b_name) in enumerate(host_names):
                    off = ~state.unit_mask(k)
                    for name in (g_name, b_name):
                        if name and model.params[name].grad is not None:
                            model.params[name].grad[off] = 0.0
            optimizer.step(model, lr)
            if cfg.trace:
                trace.append(parts)
            sums += (parts.task, parts.sparsity, parts.diversity_sum, parts.total, 1.0)
            steps += 1

        acc = evaluate(model, eval_data)
        snapshots.append(prune_report(state, model, epoch, ratio))
        pre = reports[-1]
        log = EpochLog(
            epoch=epoch, task=sums[0] / steps, sparsity=sums[1] / steps,
            gamma_R=pre.gamma_R, gamma_P=pre.gamma_P, diversity=sums[2] / steps,
            total=sums[3] / steps, acc=acc, ratio=ratio, lr=lr, survivors=list(pre.survivors),
        )
        logs.append(log)
        logger.info("epoch %d ratio %.3f loss %.4f acc %.4f gamma_P %.3g",
                    epoch, ratio, log.total, acc, log.gamma_P)
        if callback is not None:
            callback(log)

    state = ScalingState.from_model(model)
    final = _prune_step(model, state, schedule.target_ratio, cfg.survivor_floor, None, cfg.epochs)
    masked = model.copy()
    result = FitResult(None, masked, logs, reports, snapshots, final, trace)
    try:
        result.model = compact(model, plan_compaction(model, state))
    except CompactionError as exc:
        exc.result = result
        raise
    return result
