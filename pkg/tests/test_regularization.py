"""Tests for the group Lasso and ℓ1 SGD steps and for thresholding."""

import numpy as np
import pytest

from iss_rnn.errors import NumericError, ParameterError
from iss_rnn.numerics import Rng, rng_uniform
from iss_rnn.regularization import (
    clip_by_global_norm,
    group_lasso_penalty,
    sgd_step,
    sgd_step_group_lasso,
    sgd_step_l1,
    threshold_weights,
)
from iss_rnn.topology import build_lstm_iss_groups, stacked_lstm_topology

@pytest.fixture
def single_group():
    """One LSTM component: a 2×4 weight whose only group holds every entry."""
    group_map = build_lstm_iss_groups(stacked_lstm_topology(1, [1]))
    return group_map

def _weights(values):
    w = np.zeros((2, 4))
    w.flat[: len(values)] = values
    return {'lstm_0/weight': w, 'lstm_0/bias': np.zeros(4)}

def _zero_grads(weights):
    return {k: np.zeros_like(v) for k, v in weights.items()}

def test_penalty_is_sum_of_group_norms(toy_lstm):
    """Test R(w) against the per-group norms."""
    group_map = toy_lstm.group_map()
    expected = sum(np.sqrt(1e-8 + s) for s in group_map.group_sumsq(toy_lstm.tensors))

    assert group_lasso_penalty(toy_lstm.tensors, group_map, 1e-8) == pytest.approx(expected)

def test_penalty_single_group(single_group):
    """Test the {3, 4} group."""
    assert group_lasso_penalty(_weights([3.0, 4.0]), single_group) == pytest.approx(5.0)

def test_group_lasso_step_shrinks_along_unit_vector(single_group):
    """Test zero data gradients, η = 1, λ = 1 on {3, 4}: the group moves to {2.4, 3.2}."""
    weights = _weights([3.0, 4.0])
    updated = sgd_step_group_lasso(weights, _zero_grads(weights), single_group, eta=1.0, lam=1.0, epsilon=1e-12)

    np.testing.assert_allclose(updated['lstm_0/weight'].flat[:2], [2.4, 3.2], rtol=1e-9)
    np.testing.assert_array_equal(updated['lstm_0/weight'].flat[2:], 0.0)

def test_group_lasso_step_matches_closed_form_with_data_gradients(single_group):
    """Test w − η(g + λ·w/sqrt(ε + Σw²)) with nonzero data gradients and ε = 1e-8."""
    rng = np.random.default_rng(4)
    for _ in range(20):
        weights = _weights(rng.uniform(-1.0, 1.0, 8))
        grads = {'lstm_0/weight': rng.uniform(-1.0, 1.0, (2, 4)), 'lstm_0/bias': rng.uniform(-1.0, 1.0, 4)}
        eta, lam = float(rng.uniform(0.01, 1.0)), float(rng.uniform(0.0, 0.1))

        updated = sgd_step_group_lasso(weights, grads, single_group, eta=eta, lam=lam, epsilon=1e-8)

        w = weights['lstm_0/weight']
        expected = w - eta * (grads['lstm_0/weight'] + lam * w / np.sqrt(1e-8 + np.sum(w ** 2)))
        np.testing.assert_allclose(updated['lstm_0/weight'], expected, rtol=1e-6, atol=1e-12)
        np.testing.assert_allclose(updated['lstm_0/bias'], -eta * grads['lstm_0/bias'], rtol=1e-12)

def test_group_lasso_step_zero_group_stays_zero(single_group):
    """Test that an all-zero group produces no NaN and stays exactly zero."""
    weights = _weights([])

    updated = sgd_step_group_lasso(weights, _zero_grads(weights), single_group, eta=1.0, lam=10.0, epsilon=1e-8)

    assert not np.any(np.isnan(updated['lstm_0/weight']))
    np.testing.assert_array_equal(updated['lstm_0/weight'], 0.0)

def test_group_lasso_step_tiny_group_uses_epsilon(single_group):
    """Test the regularization step |w|/sqrt(ε + w²) for one weight far below sqrt(ε)."""
    weights = _weights([1e-6])

    updated = sgd_step_group_lasso(weights, _zero_grads(weights), single_group, eta=1.0, lam=1e-5, epsilon=1e-8)

    step = 1e-6 - updated['lstm_0/weight'].flat[0]
    assert step == pytest.approx(1e-5 * 1e-6 / np.sqrt(1e-8 + 1e-12), rel=1e-9)
    assert 0.0 < step < 1e-6

def test_penalty_never_increases_under_penalty_steps(toy_lstm):
    """Test 50 steps with zero data gradients: R(w) is non-increasing."""
    model = toy_lstm.astype(np.float64)
    group_map = model.group_map()
    weights = dict(model.tensors)
    penalties = [group_lasso_penalty(weights, group_map, 1e-8)]
    for _ in range(50):
        weights = sgd_step_group_lasso(weights, _zero_grads(weights), group_map, eta=0.1, lam=0.01, epsilon=1e-8)
        penalties.append(group_lasso_penalty(weights, group_map, 1e-8))

    assert all(b <= a for a, b in zip(penalties, penalties[1:]))
    assert penalties[-1] < penalties[0]

def test_group_lasso_step_lambda_zero_is_plain_sgd(toy_lstm):
    """Test that λ = 0 reduces to plain SGD."""
    rng = Rng(9)
    grads = {k: rng_uniform(rng, -1.0, 1.0, v.shape) for k, v in toy_lstm.tensors.items()}
    group_map = toy_lstm.group_map()

    regularized = sgd_step_group_lasso(toy_lstm.tensors, grads, group_map, eta=0.5, lam=0.0)
    plain = sgd_step(toy_lstm.tensors, grads, eta=0.5)

    for name in plain:
        np.testing.assert_array_equal(regularized[name], plain[name])

def test_group_lasso_step_leaves_non_members(toy_lstm):
    """Test that embeddings and biases only see their data gradient."""
    group_map = toy_lstm.group_map()
    grads = _zero_grads(toy_lstm.tensors)

    updated = sgd_step_group_lasso(toy_lstm.tensors, grads, group_map, eta=1.0, lam=0.1)

    np.testing.assert_array_equal(updated['embedding'], toy_lstm.tensors['embedding'])
    np.testing.assert_array_equal(updated['lstm_0/bias'], toy_lstm.tensors['lstm_0/bias'])
    assert np.abs(updated['lstm_0/weight'][5:]).sum() < np.abs(toy_lstm.tensors['lstm_0/weight'][5:]).sum()

def test_group_lasso_step_does_not_modify_inputs(single_group):
    """Test that the step returns new arrays."""
    weights = _weights([3.0, 4.0])
    sgd_step_group_lasso(weights, _zero_grads(weights), single_group, eta=1.0, lam=1.0)

    assert weights['lstm_0/weight'][0, 0] == 3.0

def test_group_lasso_step_errors(single_group):
    """Test invalid rates and non-finite gradients."""
    weights = _weights([3.0, 4.0])
    grads = _zero_grads(weights)
    with pytest.raises(ParameterError):
        sgd_step_group_lasso(weights, grads, single_group, eta=0.0, lam=1.0)
    with pytest.raises(ParameterError):
        sgd_step_group_lasso(weights, grads, single_group, eta=1.0, lam=-1.0)
    grads['lstm_0/weight'][0, 0] = np.inf
    with pytest.raises(NumericError) as exc_info:
        sgd_step_group_lasso(weights, grads, single_group, eta=1.0, lam=1.0)
    assert "lstm_0/weight" in str(exc_info.value)

def test_l1_step():
    """Test w = 0.5, zero gradient, η = 1, decay 0.1 → 0.4; sign(0) = 0."""
    weights = {'w': np.array([0.5, 0.0, -0.5])}
    updated = sgd_step_l1(weights, _zero_grads(weights), eta=1.0, l1_decay=0.1)

    np.testing.assert_allclose(updated['w'], [0.4, 0.0, -0.4])

def test_l1_step_only_penalized_tensors():
    """Test that the ℓ1 term only applies to the named tensors."""
    weights = {'a': np.array([0.5]), 'b': np.array([0.5])}
    updated = sgd_step_l1(weights, _zero_grads(weights), eta=1.0, l1_decay=0.1, penalized=['a'])

    assert updated['a'][0] == pytest.approx(0.4)
    assert updated['b'][0] == 0.5

def test_threshold_example(single_group):
    """Test τ = 0.1 on [0.05, −0.2, 0.09] → [0, −0.2, 0]."""
    weights = _weights([0.05, -0.2, 0.09])
    updated, count = threshold_weights(weights, single_group, 0.1)

    np.testing.assert_array_equal(updated['lstm_0/weight'].flat[:3], [0.0, -0.2, 0.0])
    assert count == 2

def test_threshold_leaves_non_members(toy_lstm):
    """Test that tensors outside every group are untouched."""
    updated, _ = threshold_weights(toy_lstm.tensors, toy_lstm.group_map(), 1.0)

    np.testing.assert_array_equal(updated['embedding'], toy_lstm.tensors['embedding'])
    np.testing.assert_array_equal(updated['softmax/bias'], toy_lstm.tensors['softmax/bias'])
    # input rows of the first layer's weight sit in gate columns, so they are members too
    assert not np.any(updated['lstm_0/weight'])

def test_threshold_contract_and_idempotence(single_group):
    """Test over 1000 random vectors: no member in (0, τ) survives and a second pass changes nothing."""
    rng = np.random.default_rng(0)
    for _ in range(1000):
        tau = float(rng.uniform(1e-4, 0.5))
        weights = _weights(rng.uniform(-1.0, 1.0, 8))
        once, _ = threshold_weights(weights, single_group, tau)
        twice, count = threshold_weights(once, single_group, tau)

        w = once['lstm_0/weight']
        assert not np.any((np.abs(w) > 0) & (np.abs(w) < tau))
        np.testing.assert_array_equal(twice['lstm_0/weight'], w)
        assert count == 0

def test_threshold_rejects_negative(single_group):
    """Test that τ < 0 is rejected."""
    with pytest.raises(ParameterError):
        threshold_weights(_weights([1.0]), single_group, -0.1)

def test_clip_by_global_norm():
    """Test joint scaling to the clip norm and the no-op below it."""
    grads = {'a': np.array([3.0]), 'b': np.array([4.0])}

    clipped, total = clip_by_global_norm(grads, 1.0)
    assert total == pytest.approx(5.0)
    np.testing.assert_allclose([clipped['a'][0], clipped['b'][0]], [0.6, 0.8])

    unchanged, _ = clip_by_global_norm(grads, 10.0)
    assert unchanged['a'][0] == 3.0
