import csv
import subprocess
import sys

import numpy as np
import pytest

from simulprune.checkpoint import load_checkpoint, save_checkpoint
from simulprune.cli import main
from simulprune.layers import Network, NetworkSpec
from simulprune.objective import ScalingState
from simulprune.pruner import apply_mask

SMALL = """\
architecture = "conv6 bn relu pool flatten"
synth_train = 300
synth_test = 120
synth_size = 6
epochs = 3
target_ratio = 0.5
lambda2 = 1e-4
lambda3 = 1e-6
"""


@pytest.fixture(scope="module")
def config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "small.toml"
    path.write_text(SMALL)
    return path


@pytest.fixture(scope="module")
def trained(config, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--config", str(config), "--seed", "7", "--out-dir", str(out)]) == 0
    return out


def test_train_outputs(trained):
    names = {p.name for p in trained.iterdir()}
    assert {"epoch_log.csv", "prune_report.csv", "masked.ckpt", "model.ckpt", "stats.csv",
            "gammas_epoch1.csv", "gammas_epoch3.csv"} <= names
    header = next(csv.reader(open(trained / "epoch_log.csv")))
    assert header == ["epoch", "task", "sparsity", "gamma_R", "gamma_P", "diversity", "total",
                      "acc", "ratio"]
    rows = list(csv.DictReader(open(trained / "gammas_epoch3.csv")))
    assert list(rows[0]) == ["rank", "layer", "filter", "gamma_abs"]
    mags = [float(r["gamma_abs"]) for r in rows]
    assert all(b <= a for a, b in zip(mags, mags[1:]))
    assert load_checkpoint(trained / "model.ckpt").n_filters() == 3


def test_train_twice_identical(config, trained, tmp_path):
    assert main(["train", "--config", str(config), "--seed", "7", "--determinism", "on",
                 "--out-dir", str(tmp_path)]) == 0
    for name in ("epoch_log.csv", "gammas_epoch2.csv", "prune_report.csv", "stats.csv"):
        assert (tmp_path / name).read_bytes() == (trained / name).read_bytes()


def test_flag_overrides_file(config, tmp_path):
    assert main(["train", "--config", str(config), "--target-ratio", "0.0", "--lambda3", "0",
                 "--trace", "--out-dir", str(tmp_path)]) == 0
    ratios = [float(r["ratio"]) for r in csv.DictReader(open(tmp_path / "epoch_log.csv"))]
    assert ratios == [0.0, 0.0, 0.0]
    trace = list(csv.DictReader(open(tmp_path / "trace.csv")))
    assert len(trace) == 3 * 5


def test_eval_masked_matches_compacted(trained, capsys):
    scores = []
    for name in ("masked.ckpt", "model.ckpt"):
        assert main(["eval", str(trained / name)]) == 0
        label, value = capsys.readouterr().out.split()
        assert label == "accuracy"
        scores.append(float(value))
    assert abs(scores[0] - scores[1]) <= 1e-3


def test_compact_command(trained, tmp_path, capsys):
    out = tmp_path / "c.ckpt"
    assert main(["compact", str(trained / "masked.ckpt"), "--out", str(out)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert float(lines[0].split()[1]) <= 1e-9
    assert load_checkpoint(out).n_filters() == 3


def test_report_fixture_params(tmp_path, capsys):
    # dense 4->3 with bias (15) + bn (6) + dense 3->2 with bias (8)
    net = Network.build(NetworkSpec.from_string("dense3+b bn relu dense2", (4,)), seed=0)
    save_checkpoint(net, tmp_path / "f.ckpt")
    assert main(["report", str(tmp_path / "f.ckpt"), "--out-dir", str(tmp_path / "r")]) == 0
    out = capsys.readouterr().out
    total = next(line.split() for line in out.splitlines() if line.startswith("total"))
    assert total[1] == "29"
    assert "survivors 3/3" in out
    rows = list(csv.reader(open(tmp_path / "r" / "stats.csv")))
    assert rows[1] == ["dense0", "15", "24"]


def test_compact_all_masked_layer_exits_4(tmp_path, capsys):
    net = Network.build(NetworkSpec.from_string("conv2 bn relu conv2 bn relu flatten dense2",
                                                (1, 3, 3)), seed=0)
    apply_mask(net, ScalingState.from_model(net), [2, 3])
    save_checkpoint(net, tmp_path / "m.ckpt")
    assert main(["compact", str(tmp_path / "m.ckpt"), "--out", str(tmp_path / "c.ckpt")]) == 4
    assert "conv2d1" in capsys.readouterr().err


def test_usage_errors(tmp_path, config):
    with pytest.raises(SystemExit) as err:
        main(["train"])
    assert err.value.code == 1
    with pytest.raises(SystemExit) as err:
        main(["frobnicate"])
    assert err.value.code == 1


@pytest.mark.parametrize("text", [
    'architecture = "conv4 bn relu flatten"\nlambda3 = 1e-6\n',
    'lambda2 = 1e-4\nlambda3 = 1e-6\nlearning_rate = 0.1\n',
    'lambda2 = 1e-4\nlambda3 = 1e-6\n[extra]\nx = 1\n',
    'lambda2 = 1e-4\nlambda3 = 1e-6\narchitecture = "conv4 banana"\nepochs = 1\n',
])
def test_bad_config_exits_1(tmp_path, text):
    path = tmp_path / "bad.toml"
    path.write_text(text)
    assert main(["train", "--config", str(path), "--out-dir", str(tmp_path / "o")]) == 1


def test_bad_checkpoint_exits_2(tmp_path):
    path = tmp_path / "x.ckpt"
    path.write_bytes(b"not a checkpoint")
    assert main(["report", str(path)]) == 2
    assert main(["report", str(tmp_path / "missing.ckpt")]) == 2


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--trials", "1"]) == 0
    assert "checks passed" in capsys.readouterr().out


def test_console_script_entry(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "simulprune.cli", "--help"], capture_output=True,
                          text=True)
    assert proc.returncode == 0
    assert "gradcheck" in proc.stdout
