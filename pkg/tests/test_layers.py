import numpy as np
import pytest

from simulprune import tensor as T
from simulprune.exceptions import DegenerateStateError, ShapeError, SpecError
from simulprune.layers import (BatchNormState, LayerConfig, Network, NetworkSpec,
                               batchnorm_forward, input_keep, scaling_forward)
from simulprune.tensor import Tensor


def test_from_string_names_and_shapes():
    spec = NetworkSpec.from_string("conv4 bn relu pool flatten dense3", (2, 6, 6))
    assert [l.name for l in spec.layers] == ["conv2d0", "batchnorm0", "relu0", "maxpool0",
                                              "flatten0", "dense0"]
    assert spec.infer_shapes()[-1] == (3,)
    assert spec.layers[0].pad == 1 and spec.layers[-1].bias


def test_from_string_options():
    spec = NetworkSpec.from_string("conv5k5s2p0+b scale relu flatten dense2-b", (1, 9, 9))
    conv = spec.layers[0]
    assert conv.kernel == (5, 5) and conv.stride == 2 and conv.pad == 0 and conv.bias
    assert spec.infer_shapes()[0] == (5, 3, 3)
    assert not spec.layers[-1].bias


def test_bad_token():
    with pytest.raises(SpecError):
        NetworkSpec.from_string("conv4 banana", (1, 4, 4))


def test_hidden_layer_needs_host():
    with pytest.raises(SpecError):
        NetworkSpec.from_string("conv4 relu flatten dense2", (1, 4, 4))


def test_shape_inference_failure():
    with pytest.raises(SpecError):
        NetworkSpec.from_string("conv4k5p0 bn relu flatten dense2", (1, 3, 3))


def test_unknown_kind():
    with pytest.raises(SpecError):
        LayerConfig("dropout")


def test_spec_dict_round_trip():
    spec = NetworkSpec.from_string("conv4 bn relu pool flatten dense3", (2, 6, 6))
    again = NetworkSpec.from_dict(spec.to_dict())
    assert again == spec


def test_two_layer_dense_output_shape():
    spec = NetworkSpec.from_string("dense8 bn relu dense3", (4,))
    net = Network.build(spec, seed=0)
    assert net.forward(np.ones((5, 4))).shape == (5, 3)


def test_forward_input_shape_checked():
    net = Network.build(NetworkSpec.from_string("dense8 bn relu dense3", (4,)), seed=0)
    with pytest.raises(ShapeError):
        net.forward(np.ones((5, 3)))


def test_bn_gamma_init():
    net = Network.build(NetworkSpec.from_string("conv4 bn relu conv4 bn relu flatten dense2",
                                                (1, 4, 4)), seed=0)
    for g in net.gamma_tensors():
        assert np.all(g.data == 0.5)


def test_scaling_gamma_init():
    net = Network.build(NetworkSpec.from_string("dense5 scale relu dense2", (3,)), seed=0)
    for g in net.gamma_tensors():
        assert np.all(g.data == 1.0)


def test_gamma_count_equals_prunable_filters():
    net = Network.build(NetworkSpec.from_string("conv4 bn relu conv6 scale relu flatten dense2",
                                                (1, 4, 4)), seed=0)
    assert sum(g.size for g in net.gamma_tensors()) == net.n_filters() == 10


# batch norm


def test_batchnorm_hand_value():
    state = BatchNormState.create(1, gamma_init=2.0)
    state.beta.data[:] = 1.0
    x = Tensor(np.array([1.0, 2.0, 3.0, 4.0]).reshape(4, 1))
    out = batchnorm_forward(x, state, "train").data.ravel()
    zhat = (np.array([1, 2, 3, 4]) - 2.5) / np.sqrt(1.25 + 1e-5)
    np.testing.assert_allclose(out, 2 * zhat + 1, rtol=1e-12)


def test_batchnorm_identity_on_standardized_input():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((64, 3))
    x = (x - x.mean(0)) / x.std(0)
    state = BatchNormState.create(3, gamma_init=1.0)
    out = batchnorm_forward(Tensor(x), state, "train").data
    np.testing.assert_allclose(out, x / np.sqrt(1 + 1e-5), rtol=1e-10)


def test_batchnorm_zero_gamma_gives_beta():
    rng = np.random.default_rng(1)
    state = BatchNormState.create(3, gamma_init=1.0)
    state.gamma.data[1] = 0.0
    state.beta.data[:] = [0.1, 0.7, -0.3]
    out = batchnorm_forward(Tensor(rng.standard_normal((4, 3, 2, 2))), state, "train").data
    np.testing.assert_array_equal(out[:, 1], 0.7)


def test_batchnorm_train_statistics():
    rng = np.random.default_rng(2)
    state = BatchNormState.create(2, gamma_init=1.0)
    state.gamma.data[:] = [1.5, 0.5]
    state.beta.data[:] = [0.2, -1.0]
    x = rng.standard_normal((16, 2, 3, 3)) * 3 + 1
    out = batchnorm_forward(Tensor(x), state, "train").data
    var = x.var(axis=(0, 2, 3))
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), [0.2, -1.0], atol=1e-12)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), np.array([1.5, 0.5]) ** 2 * var / (var + 1e-5),
                               rtol=1e-6)


def test_batchnorm_running_stats_update_and_eval():
    rng = np.random.default_rng(3)
    state = BatchNormState.create(2)
    x = rng.standard_normal((8, 2)) + 4
    batchnorm_forward(Tensor(x), state, "train")
    n = len(x)
    np.testing.assert_allclose(state.running_mean, 0.1 * x.mean(0), rtol=1e-12)
    np.testing.assert_allclose(state.running_var, 0.9 + 0.1 * x.var(0) * n / (n - 1), rtol=1e-12)
    out = batchnorm_forward(Tensor(x), state, "eval").data
    expected = 0.5 * (x - state.running_mean) / np.sqrt(state.running_var + 1e-5)
    np.testing.assert_allclose(out, expected, rtol=1e-12)


def test_batchnorm_degenerate_batch():
    with pytest.raises(DegenerateStateError):
        batchnorm_forward(Tensor(np.ones((1, 2))), BatchNormState.create(2), "train")


# scaling


def test_scaling_identity_and_zeroing():
    x = np.arange(8.0).reshape(2, 2, 2, 1)
    np.testing.assert_array_equal(scaling_forward(Tensor(x), Tensor(np.ones(2))).data, x)
    out = scaling_forward(Tensor(x), Tensor([0.0, 1.0])).data
    np.testing.assert_array_equal(out[:, 0], 0.0)
    np.testing.assert_array_equal(out[:, 1], x[:, 1])


def test_scaling_hand_value():
    out = scaling_forward(Tensor(np.array([[1.0], [2.0]])), Tensor([2.0]))
    np.testing.assert_array_equal(out.data.ravel(), [2.0, 4.0])


def test_scaling_length_mismatch():
    with pytest.raises(ShapeError):
        scaling_forward(Tensor(np.ones((2, 3))), Tensor(np.ones(2)))


def test_scaling_gamma_gradient():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((3, 2, 2, 2))
    g_out = rng.standard_normal(x.shape)
    gamma = Tensor([0.3, -1.2], requires_grad=True)
    T.backward(T.sum_(T.mul(scaling_forward(Tensor(x), gamma), Tensor(g_out))))
    np.testing.assert_allclose(gamma.grad, (g_out * x).sum(axis=(0, 2, 3)), rtol=1e-12)


def _turned_off_grads(spec_text):
    rng = np.random.default_rng(5)
    net = Network.build(NetworkSpec.from_string(spec_text, (2, 4, 4)), seed=1)
    net.gamma_tensors()[0].data[1] = 0.0
    beta = net.beta_tensors()[0]
    if beta is not None:
        beta.data[1] = 0.0
    loss = T.softmax_cross_entropy(net.forward(rng.standard_normal((4, 2, 4, 4)), "train"),
                                   [0, 1, 2, 0])
    T.backward(loss)
    return net.unit_weights(0).grad[1]


def test_zero_scaling_blocks_weight_gradient():
    np.testing.assert_array_equal(_turned_off_grads("conv3 scale relu flatten dense3"), 0.0)


def test_zero_bn_gamma_and_beta_block_weight_gradient():
    np.testing.assert_array_equal(_turned_off_grads("conv3 bn relu flatten dense3"), 0.0)


def test_input_keep_expands_flatten_blocks():
    spec = NetworkSpec.from_string("conv3 bn relu pool flatten dense2", (1, 4, 4))
    keep = input_keep(spec, [np.array([True, False, True])])
    np.testing.assert_array_equal(keep[0], [0])
    np.testing.assert_array_equal(keep[5], [0, 1, 2, 3, 8, 9, 10, 11])


def test_copy_is_independent():
    net = Network.build(NetworkSpec.from_string("dense4 bn relu dense2", (3,)), seed=0)
    clone = net.copy()
    clone.gamma_tensors()[0].data[:] = 9.0
    assert np.all(net.gamma_tensors()[0].data == 0.5)


def test_decay_excludes_gamma_and_beta():
    net = Network.build(NetworkSpec.from_string("dense4 bn relu dense2", (3,)), seed=0)
    decayed = {n for n, _ in net.named_parameters() if net.decayed(n)}
    assert decayed == {"dense0.weight", "dense0.bias", "dense1.weight", "dense1.bias"}
