"""Command-line front end.

Subcommands: ``train``, ``eval``, ``compact``, ``report``, ``gradcheck``.

Exit codes: 0 success, 1 usage or configuration error, 2 data or file
format error, 3 numeric failure, 4 compaction failure.
"""

import argparse
import logging
import os
import sys
from collections import defaultdict

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import gradcheck as gc
from .checkpoint import load_checkpoint, save_checkpoint
from .data import AugmentConfig, Dataset, load_cifar10_binary, load_idx, synth_split
from .exceptions import (CompactionError, ContractError, DegenerateStateError, FormatError,
                         NumericError, ShapeError, SimulpruneError, SpecError)
from .layers import Network, NetworkSpec
from .metrics import model_stats, write_stats
from .objective import ObjectiveConfig, ScalingState, write_trace
from .pruner import (PruneSchedule, compact, plan_compaction, prune_report, write_prune_report,
                     write_sorted_gammas)
from .trainer import TrainConfig, evaluate, fit, predict_batches, write_epoch_log

logger = logging.getLogger("simulprune")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC, EXIT_COMPACTION = 0, 1, 2, 3, 4

REQUIRED_KEYS = ("lambda2", "lambda3")
DEFAULTS = {
    "architecture": "conv16 bn relu conv16 bn relu pool conv16 bn relu conv16 bn relu pool flatten",
    "task": "classification",
    "dataset": "synth",
    "data_path": None,
    "idx_train_images": None, "idx_train_labels": None,
    "idx_test_images": None, "idx_test_labels": None,
    "synth_classes": 4, "synth_train": 2000, "synth_test": 500, "synth_size": 8,
    "synth_channels": 3, "synth_snr": 0.5, "synth_seed": 0,
    "standardize": True,
    "augment": False,
    "target_ratio": 0.5, "start_ratio": 0.0,
    "lambda1": 1e-4,
    "optimizer": "sgd_nesterov", "lr": 0.1, "lr_drops": [[0.5, 0.1], [0.75, 0.1]],
    "momentum": 0.9, "weight_decay": 1e-4, "batch_size": 64, "epochs": 30,
    "seed": 0, "determinism": True, "freeze_pruned": False, "survivor_floor": 1,
    "bn_gamma_init": 0.5, "scaling_gamma_init": 1.0,
}


class UsageError(SimulpruneError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# configuration


def load_config(path):
    """Read a flat TOML file; unknown keys and nested tables are rejected."""
    with open(path, "rb") as fh:
        try:
            raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise UsageError(f"{path}: {exc}") from None
    nested = [k for k, v in raw.items() if isinstance(v, dict)]
    if nested:
        raise UsageError(f"{path}: config must be flat, found tables {nested}")
    unknown = sorted(set(raw) - set(DEFAULTS) - set(REQUIRED_KEYS))
    if unknown:
        raise UsageError(f"{path}: unknown keys {unknown}")
    missing = [k for k in REQUIRED_KEYS if k not in raw]
    if missing:
        raise UsageError(f"{path}: missing required keys {missing}")
    return {**DEFAULTS, **raw}


def apply_overrides(cfg, args):
    for key in ("seed", "target_ratio", "lambda1", "lambda2", "lambda3"):
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    if getattr(args, "determinism", None) is not None:
        cfg["determinism"] = args.determinism == "on"
    if getattr(args, "freeze_pruned", False):
        cfg["freeze_pruned"] = True
    return cfg


def load_raw(cfg):
    """Unnormalised train and test datasets described by ``cfg``."""
    kind = cfg["dataset"]
    if kind == "synth":
        train, test = synth_split(cfg["synth_classes"], cfg["synth_train"], cfg["synth_test"],
                                  cfg["synth_size"], cfg["synth_seed"], cfg["synth_channels"],
                                  cfg["synth_snr"])
    elif kind == "cifar10":
        if not cfg["data_path"]:
            raise UsageError("dataset 'cifar10' needs data_path")
        train = load_cifar10_binary(cfg["data_path"], "train")
        test = load_cifar10_binary(cfg["data_path"], "test")
    elif kind == "idx":
        if not cfg["idx_train_images"] or not cfg["idx_test_images"]:
            raise UsageError("dataset 'idx' needs idx_train_images and idx_test_images")
        train = load_idx(cfg["idx_train_images"], cfg["idx_train_labels"], "train")
        test = load_idx(cfg["idx_test_images"], cfg["idx_test_labels"], "test")
    else:
        raise UsageError(f"unknown dataset {kind!r}")
    if cfg["task"] == "reconstruction":
        train = Dataset(train.images, split="train")
        test = Dataset(test.images, split="test")
    return train, test


def norm_stats(train, enabled=True):
    """Per-channel mean and std of the training images (identity when disabled)."""
    c = train.images.shape[1]
    if not enabled:
        return {"mean": [0.0] * c, "std": [1.0] * c}
    axes = (0,) + tuple(range(2, train.images.ndim))
    std = train.images.std(axis=axes)
    return {"mean": train.images.mean(axis=axes).tolist(),
            "std": np.where(std > 0, std, 1.0).tolist()}


def normalize(ds, norm):
    shape = (1, -1) + (1,) * (ds.images.ndim - 2)
    mean, std = np.reshape(norm["mean"], shape), np.reshape(norm["std"], shape)
    return Dataset((ds.images - mean) / std, ds.labels, None, ds.split)


# --------------------------------------------------------------------------
# subcommands


def cmd_train(args):
    cfg = apply_overrides(load_config(args.config), args)
    out = args.out_dir
    os.makedirs(out, exist_ok=True)
    train, test = load_raw(cfg)
    norm = norm_stats(train, cfg["standardize"])
    train, test = normalize(train, norm), normalize(test, norm)
    task = cfg["task"]
    n_out = train.n_classes if task == "classification" else int(np.prod(train.images.shape[1:]))
    try:
        spec = NetworkSpec.from_string(f"{cfg['architecture']} dense{n_out}",
                                       train.images.shape[1:], task)
        objective = ObjectiveConfig(cfg["lambda1"], cfg["lambda2"], cfg["lambda3"])
        schedule = PruneSchedule(cfg["target_ratio"], cfg["epochs"], cfg["start_ratio"])
        tcfg = TrainConfig(
            optimizer=cfg["optimizer"], lr=cfg["lr"], lr_drops=tuple(map(tuple, cfg["lr_drops"])),
            momentum=cfg["momentum"], weight_decay=cfg["weight_decay"],
            batch_size=cfg["batch_size"], epochs=cfg["epochs"], seed=cfg["seed"],
            determinism=cfg["determinism"], freeze_pruned=cfg["freeze_pruned"],
            survivor_floor=cfg["survivor_floor"],
            augment=AugmentConfig() if cfg["augment"] else None, trace=args.trace,
        )
    except (ContractError, SpecError) as exc:
        raise UsageError(str(exc)) from None
    model = Network.build(spec, cfg["seed"], cfg["bn_gamma_init"], cfg["scaling_gamma_init"])
    baseline_stats = model_stats(model)
    meta = {"norm": norm, "config": cfg}

    def on_epoch(log):
        print(f"epoch {log.epoch:4d}  ratio {log.ratio:.4f}  loss {log.total:.5f}  "
              f"acc {log.acc:.4f}  gamma_P {log.gamma_P:.3g}")

    try:
        result = fit(model, train, objective, schedule, tcfg, eval_data=test, callback=on_epoch)
    except CompactionError as exc:
        res = exc.result
        _write_train_outputs(out, res, args.trace)
        save_checkpoint(res.masked_model, os.path.join(out, "masked.ckpt"), meta)
        print(f"compaction failed: layer {exc.layer_name} has no surviving filter", file=sys.stderr)
        return EXIT_COMPACTION
    _write_train_outputs(out, result, args.trace)
    save_checkpoint(result.masked_model, os.path.join(out, "masked.ckpt"), meta)
    save_checkpoint(result.model, os.path.join(out, "model.ckpt"), meta)
    stats = model_stats(result.model)
    write_stats(os.path.join(out, "stats.csv"), stats)
    print(f"final gamma_P {result.final_gamma_P:.3g}  compacted {evaluate(result.model, test):.4f}  "
          f"params {stats.params_total}/{baseline_stats.params_total}  "
          f"flops {stats.flops_total}/{baseline_stats.flops_total}")
    return EXIT_OK


def _write_train_outputs(out, result, trace):
    write_epoch_log(os.path.join(out, "epoch_log.csv"), result.logs)
    for snap in result.snapshots:
        write_sorted_gammas(os.path.join(out, f"gammas_epoch{snap.epoch}.csv"), snap)
    write_prune_report(os.path.join(out, "prune_report.csv"), result.reports + [result.final_report])
    if trace:
        write_trace(os.path.join(out, "trace.csv"), result.trace)


def cmd_eval(args):
    model, meta = load_checkpoint(args.checkpoint, return_meta=True)
    cfg = load_config(args.config) if args.config else meta.get("config")
    if cfg is None:
        raise UsageError("checkpoint carries no data config; pass --config")
    train, test = load_raw(cfg)
    norm = meta.get("norm") or norm_stats(train, cfg["standardize"])
    data = normalize(train if args.split == "train" else test, norm)
    score = evaluate(model, data)
    label = "accuracy" if model.spec.task == "classification" else "psnr_db"
    print(f"{label} {score:.6f}")
    return EXIT_OK


def cmd_compact(args):
    model, meta = load_checkpoint(args.checkpoint, return_meta=True)
    try:
        small = compact(model, plan_compaction(model))
    except CompactionError as exc:
        print(f"compaction failed: layer {exc.layer_name} has no surviving filter", file=sys.stderr)
        return EXIT_COMPACTION
    rng = np.random.default_rng(args.seed)
    x = rng.standard_normal((args.samples,) + tuple(model.spec.input_shape))
    diff = float(np.max(np.abs(predict_batches(model, x) - predict_batches(small, x))))
    save_checkpoint(small, args.out, meta)
    before, after = model_stats(model), model_stats(small)
    print(f"max_abs_diff {diff:.3e}")
    print(f"params {before.params_total} -> {after.params_total}")
    print(f"flops {before.flops_total} -> {after.flops_total}")
    return EXIT_OK


def cmd_report(args):
    model = load_checkpoint(args.checkpoint)
    stats = model_stats(model)
    print(f"{'layer':<14}{'params':>10}{'flops':>14}")
    for layer, params, flops in stats.rows():
        print(f"{layer:<14}{params:>10}{flops:>14}")
    print(f"{'total':<14}{stats.params_total:>10}{stats.flops_total:>14}")
    if model.units:
        state = ScalingState.from_model(model)
        report = prune_report(state, model)
        for name, s, t in zip(report.layers, report.survivors, report.totals):
            print(f"{name:<14}survivors {s}/{t}")
        print(f"gamma_P {report.gamma_P:.6g}")
    if args.out_dir:
        os.makedirs(args.out_dir, exist_ok=True)
        write_stats(os.path.join(args.out_dir, "stats.csv"), stats)
        if model.units:
            write_prune_report(os.path.join(args.out_dir, "prune_report.csv"), [report])
            write_sorted_gammas(os.path.join(args.out_dir, "gammas.csv"), report)
    return EXIT_OK


def cmd_gradcheck(args):
    results = gc.run_suite(args.trials, args.seed)
    worst = defaultdict(float)
    for r in results:
        worst[r.name] = max(worst[r.name], r.error)
    failed = [r for r in results if not r.passed]
    for name, err in worst.items():
        print(f"{name:<24}max rel err {err:.2e}  {'ok' if err < gc.TOL else 'FAIL'}")
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_NUMERIC if failed else EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser():
    parser = _Parser(prog="simulprune", description="Online filter pruning during training.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train with online pruning and write outputs")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--determinism", choices=("on", "off"))
    p.add_argument("--target-ratio", dest="target_ratio", type=float)
    p.add_argument("--lambda1", type=float)
    p.add_argument("--lambda2", type=float)
    p.add_argument("--lambda3", type=float)
    p.add_argument("--freeze-pruned", dest="freeze_pruned", action="store_true")
    p.add_argument("--trace", action="store_true")
    p.add_argument("--out-dir", dest="out_dir", default="runs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy (or PSNR) of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--config")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compact", help="remove turned-off filters from a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--samples", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_compact)

    p = sub.add_parser("report", help="parameter/FLOP counts and survivors of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--out-dir", dest="out_dir")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ContractError, SpecError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, ShapeError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, DegenerateStateError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except CompactionError as exc:
        print(f"compaction failed: {exc}", file=sys.stderr)
        return EXIT_COMPACTION


if __name__ == "__main__":
    sys.exit(main())
