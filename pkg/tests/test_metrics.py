import csv

import numpy as np
import pytest

from simulprune.layers import Network, NetworkSpec
from simulprune.metrics import (STATS_COLUMNS, count_flops, count_params, model_stats,
                                write_stats)
from simulprune.objective import ScalingState
from simulprune.pruner import apply_mask, compact, plan_compaction


def layer(spec_text, input_shape, index=0):
    return model_stats(NetworkSpec.from_string(spec_text, input_shape)).per_layer[index]


def test_dense_with_bias():
    s = layer("dense3+b scale relu dense2", (4,))
    assert (s.params, s.flops) == (15, 24)


def test_conv_no_bias():
    s = layer("conv4 bn relu flatten dense2", (2, 5, 5))
    assert s.params == 72


def test_conv_flops_valid_padding():
    s = layer("conv1p0 bn relu flatten dense2", (1, 5, 5))
    assert s.flops == 162


def test_bn_and_scaling_params():
    stats = model_stats(NetworkSpec.from_string("conv4 bn relu conv3 scale relu flatten dense2",
                                                (1, 4, 4)))
    by_kind = {s.layer: s for s in stats.per_layer}
    assert by_kind["batchnorm0"].params == 8
    assert by_kind["scaling0"].params == 3
    assert by_kind["relu0"].params == 0


def test_params_match_network_arrays():
    net = Network.build(NetworkSpec.from_string("conv4 bn relu pool conv3+b scale relu flatten dense5",
                                                (2, 6, 6)), seed=0)
    assert count_params(net) == sum(t.size for _, t in net.named_parameters())


def test_totals_equal_layer_sums():
    stats = model_stats(NetworkSpec.from_string("conv4 bn relu pool flatten dense8 bn relu dense3",
                                                (3, 8, 8)))
    assert stats.params_total == sum(s.params for s in stats.per_layer)
    assert stats.flops_total == sum(s.flops for s in stats.per_layer)


def test_halving_filters_halves_conv_flops():
    a = layer("conv8 bn relu flatten dense2", (3, 6, 6))
    b = layer("conv4 bn relu flatten dense2", (3, 6, 6))
    assert a.flops == 2 * b.flops


def test_input_shape_override():
    spec = NetworkSpec.from_string("conv2 bn relu flatten dense2", (1, 4, 4))
    small, large = model_stats(spec), model_stats(spec, (1, 8, 8))
    assert large.per_layer[0].flops == 4 * small.per_layer[0].flops
    assert large.per_layer[-1].params == 4 * small.per_layer[-1].params - 6
    assert count_flops(spec, (1, 8, 8)) == large.flops_total


def test_compacted_smaller_than_masked():
    net = Network.build(NetworkSpec.from_string("conv4 bn relu conv4 bn relu flatten dense3",
                                                (1, 4, 4)), seed=0)
    state = ScalingState.from_model(net)
    apply_mask(net, state, [1, 6])
    small = compact(net, plan_compaction(net, state))
    assert count_params(small) < count_params(net)
    assert count_flops(small) < count_flops(net)


def test_write_stats(tmp_path):
    stats = model_stats(NetworkSpec.from_string("dense3+b scale relu dense2", (4,)))
    write_stats(tmp_path / "s.csv", stats)
    rows = list(csv.reader(open(tmp_path / "s.csv")))
    assert rows[:3] == [list(STATS_COLUMNS), ["dense0", "15", "24"], ["scaling0", "3", "3"]]
    assert len(rows) == 1 + len(stats.per_layer)


@pytest.mark.parametrize("f,c,k,hw", [(1, 1, 1, 3), (3, 2, 3, 5), (5, 4, 5, 7)])
def test_conv_flops_count_multiplies(f, c, k, hw):
    # count multiply-adds with an explicit loop nest over a valid convolution
    out = hw - k + 1
    macs = sum(1 for _ in np.ndindex(f, out, out, c, k, k))
    s = layer(f"conv{f}k{k}p0 bn relu flatten dense2", (c, hw, hw))
    assert s.flops == 2 * macs
