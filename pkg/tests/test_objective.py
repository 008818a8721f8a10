import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from simulprune import tensor as T
from simulprune.exceptions import DegenerateStateError
from simulprune.gradcheck import check
from simulprune.layers import Network, NetworkSpec
from simulprune.objective import (LossBreakdown, ObjectiveConfig, ScalingState, diversity_matrix,
                                  diversity_term, layer_diversity, mean_pairwise_diversity,
                                  pairwise_diversity, pruned_share, pruning_ratio_terms,
                                  sparsity_term, task_loss, total_loss)
from simulprune.pruner import apply_mask
from simulprune.tensor import Tensor


def naive_div_sum(w):
    """Double loop over ordered pairs, the definition written out."""
    total = 0.0
    for i in range(len(w)):
        for j in range(len(w)):
            if i != j:
                ci = w[i] / np.linalg.norm(w[i])
                cj = w[j] / np.linalg.norm(w[j])
                total += 1.0 - abs(ci @ cj)
    return total


# sparsity


def test_sparsity_all_masked():
    state = ScalingState.from_values([0.5, 0.2], mask=[False, False])
    assert sparsity_term(state).item() == 0.0


def test_sparsity_hand_value():
    state = ScalingState.from_values([0.5, -0.2, 0.3], mask=[True, True, False])
    assert sparsity_term(state).item() == pytest.approx(0.7, abs=1e-15)


def test_sparsity_homogeneous():
    a = ScalingState.from_values([0.5, -0.2, 0.3], mask=[True, True, False])
    b = ScalingState.from_values([1.0, -0.4, 0.3], mask=[True, True, False])
    assert sparsity_term(b).item() == pytest.approx(2 * sparsity_term(a).item(), rel=1e-15)


def test_sparsity_gradient_is_sign_on_remained():
    state = ScalingState.from_values([0.5, -0.2, 0.0, 0.3], mask=[True, True, True, False])
    T.backward(sparsity_term(state))
    np.testing.assert_array_equal(state.gammas[0].grad, [1.0, -1.0, 0.0, 0.0])


# pruning ratio terms


def test_ratio_nothing_pruned():
    gr, gp = pruning_ratio_terms(ScalingState.from_values([0.1, 0.2, 0.3]))
    assert gr.item() == 1.0 and gp == 0.0


def test_ratio_hand_value():
    state = ScalingState.from_values([0.1, 0.2, 0.3, 0.4], mask=[False, False, True, True])
    gr, gp = pruning_ratio_terms(state)
    assert gp == pytest.approx(0.3, abs=1e-15)
    assert gr.item() + gp == 1.0


def test_ratio_all_zero():
    with pytest.raises(DegenerateStateError):
        pruning_ratio_terms(ScalingState.from_values([0.0, 0.0]))


def test_ratio_negative_gamma_warns():
    with pytest.warns(RuntimeWarning):
        pruning_ratio_terms(ScalingState.from_values([0.3, -0.1], mask=[True, False]))


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(2, 30), elements=st.floats(0.01, 10)),
       st.integers(0, 2**31 - 1))
def test_ratio_terms_sum_to_one(values, seed):
    mask = np.random.default_rng(seed).random(values.size) < 0.5
    gr, gp = pruning_ratio_terms(ScalingState.from_values(values, mask))
    assert gr.item() + gp == pytest.approx(1.0, abs=1e-15)
    assert pruned_share(values, mask) == pytest.approx(gp, abs=1e-15)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.integers(2, 20), elements=st.floats(0.05, 5)),
       st.integers(0, 2**31 - 1))
def test_pruning_loss_step_increases_gamma_r(values, seed):
    mask = np.random.default_rng(seed).random(values.size) < 0.5
    mask[0], mask[-1] = True, False
    state = ScalingState.from_values(values, mask)
    gr, _ = pruning_ratio_terms(state)
    T.backward(T.mul(gr, -1.0))
    g = state.gammas[0].grad
    assert np.all(g[mask] < 0)
    state.gammas[0].data -= 1e-3 * g
    after, _ = pruning_ratio_terms(state)
    assert after.item() > gr.item()


# diversity


def test_pairwise_diversity_examples():
    assert pairwise_diversity([1.0, 2.0], [1.0, 2.0]) == pytest.approx(0.0, abs=1e-15)
    assert pairwise_diversity([1.0, 0.0], [0.0, 1.0]) == 1.0
    assert pairwise_diversity([1.0, 1.0], [1.0, 0.0]) == pytest.approx(1 - 1 / np.sqrt(2), abs=1e-12)


def test_pairwise_diversity_zero_norm():
    with pytest.raises(DegenerateStateError):
        pairwise_diversity([0.0, 0.0], [1.0, 0.0])


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, 5, elements=st.floats(-10, 10)),
       arrays(np.float64, 5, elements=st.floats(-10, 10)))
def test_pairwise_diversity_bounded_and_symmetric(a, b):
    if np.linalg.norm(a) < 1e-6 or np.linalg.norm(b) < 1e-6:
        return
    d = pairwise_diversity(a, b)
    assert 0.0 <= d <= 1.0
    assert d == pytest.approx(pairwise_diversity(b, a), abs=1e-15)


def test_layer_diversity_examples():
    assert layer_diversity(Tensor([[1.0, 2.0]])).item() == 0.0
    assert layer_diversity(Tensor(np.eye(2))).item() == 2.0
    assert layer_diversity(Tensor(np.eye(3))).item() == 6.0


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_layer_diversity_matches_double_loop(n, d, seed):
    w = np.random.default_rng(seed).standard_normal((n, d))
    value = layer_diversity(Tensor(w)).item()
    assert value == pytest.approx(naive_div_sum(w), abs=1e-12)
    m = diversity_matrix(w)
    assert value == pytest.approx(2 * m[np.triu_indices(n, 1)].sum(), abs=1e-12)
    assert np.all((m >= 0) & (m <= 1))


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 5), st.integers(0, 4), st.floats(0.01, 100), st.integers(0, 2**31 - 1))
def test_layer_diversity_rescale_invariant(n, i, c, seed):
    w = np.random.default_rng(seed).standard_normal((n, 4))
    scaled = w.copy()
    scaled[i % n] *= c
    assert layer_diversity(Tensor(scaled)).item() == pytest.approx(
        layer_diversity(Tensor(w)).item(), abs=1e-10)


def test_layer_diversity_rows_and_cols_restrict():
    rng = np.random.default_rng(3)
    w = rng.standard_normal((4, 6))
    got = layer_diversity(Tensor(w), rows=[0, 2, 3], cols=[1, 4, 5]).item()
    assert got == pytest.approx(naive_div_sum(w[np.ix_([0, 2, 3], [1, 4, 5])]), abs=1e-12)


def test_layer_diversity_skips_zero_norm_rows():
    w = np.array([[1.0, 0.0], [0.0, 0.0], [0.0, 1.0]])
    value, skipped = layer_diversity(Tensor(w), return_skipped=True)
    assert value.item() == 2.0 and skipped == 2


def test_layer_diversity_gradient():
    rng = np.random.default_rng(4)
    w = Tensor(rng.standard_normal((4, 5)), requires_grad=True)
    assert check(lambda: layer_diversity(w, rows=[0, 1, 3]), [w]) < 1e-6


# total loss


def _small_net(seed=0):
    spec = NetworkSpec.from_string("conv3 bn relu conv4 scale relu pool flatten dense3", (2, 4, 4))
    return Network.build(spec, seed=seed)


def test_total_loss_reduces_to_task():
    rng = np.random.default_rng(0)
    net = _small_net()
    x, y = rng.standard_normal((4, 2, 4, 4)), rng.integers(0, 3, 4)
    state = ScalingState.from_model(net)
    loss, parts = total_loss(net, x, y, state, ObjectiveConfig(0.0, 0.0, 0.0), mode="eval")
    expected = task_loss(net, net.forward(x, "eval"), y, "classification").item()
    assert loss.item() == expected


def test_total_loss_slimming_case():
    rng = np.random.default_rng(1)
    net = _small_net()
    state = ScalingState.from_model(net)
    g = net.gamma_tensors()
    g[0].data[:] = [0.5, -0.2, 0.3]
    apply_mask(net, state, [2])
    x, y = rng.standard_normal((4, 2, 4, 4)), rng.integers(0, 3, 4)
    loss, parts = total_loss(net, x, y, state, ObjectiveConfig(1e-4, 0.0, 0.0), mode="eval")
    assert parts.sparsity == pytest.approx(1e-4 * (0.7 + np.abs(g[1].data).sum()), rel=1e-14)
    assert loss.item() == pytest.approx(parts.task + parts.sparsity, rel=1e-14)


def test_breakdown_accounting_identity():
    rng = np.random.default_rng(2)
    for trial in range(100):
        net = _small_net(seed=trial)
        state = ScalingState.from_model(net)
        for gt in net.gamma_tensors():
            gt.data[:] = rng.uniform(0.1, 1.0, gt.shape)
        pruned = np.flatnonzero(rng.random(len(state)) < 0.3)
        apply_mask(net, state, pruned)
        cfg = ObjectiveConfig(*rng.uniform(0, 1e-2, 3))
        x, y = rng.standard_normal((4, 2, 4, 4)), rng.integers(0, 3, 4)
        loss, parts = total_loss(net, x, y, state, cfg)
        assert isinstance(parts, LossBreakdown)
        assert parts.components_sum() == pytest.approx(loss.item(), rel=1e-12)
        assert parts.gamma_R + parts.gamma_P == pytest.approx(1.0, abs=1e-15)


def test_total_loss_gradients_match_finite_differences():
    rng = np.random.default_rng(3)
    net = _small_net(seed=5)
    state = ScalingState.from_model(net)
    for gt in net.gamma_tensors():
        gt.data[:] = rng.uniform(0.2, 1.0, gt.shape)
    state.mask = np.array([True, False, True, True, True, False, True])
    x, y = rng.standard_normal((4, 2, 4, 4)), rng.integers(0, 3, 4)
    cfg = ObjectiveConfig(0.5, 0.5, 0.05)
    params = [t for _, t in net.named_parameters()]
    assert check(lambda: total_loss(net, x, y, state, cfg)[0], params) < 1e-4


def test_diversity_term_uses_remained_filters_and_live_inputs():
    net = _small_net(seed=6)
    state = ScalingState.from_model(net)
    state.mask = np.array([True, False, True, True, True, True, False])
    w0 = net.unit_weights(0).data.reshape(3, -1)
    w1 = net.unit_weights(1).data[:, [0, 2]].reshape(4, -1)
    expected = naive_div_sum(w0[[0, 2]]) + naive_div_sum(w1[[0, 1, 2]])
    assert diversity_term(net, state).item() == pytest.approx(expected, abs=1e-12)


def test_mean_pairwise_diversity_in_unit_interval():
    net = _small_net(seed=7)
    value = mean_pairwise_diversity(net)
    assert 0.0 <= value <= 1.0
