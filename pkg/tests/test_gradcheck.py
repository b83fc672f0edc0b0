"""Finite-difference checks of the analytic LSTM and RHN gradients."""

import numpy as np
import pytest

from iss_rnn.errors import NumericError, ParameterError
from iss_rnn.gradcheck import finite_difference_check, lstm_problem, model_problem, rhn_problem
from iss_rnn.models import LstmLanguageModel, RhnLanguageModel
from iss_rnn.numerics import Rng

LSTM_CONFIGS = [
    # (seed, input_size, hidden_sizes, steps, dropout_keep)
    (0, 3, [3], 1, 1.0),
    (1, 3, [3], 3, 1.0),
    (2, 2, [4], 4, 1.0),
    (3, 4, [2], 3, 1.0),
    (4, 1, [1], 5, 1.0),
    (5, 3, [2, 3], 2, 1.0),
    (6, 2, [3, 2], 3, 1.0),
    (7, 4, [3, 3], 2, 1.0),
    (8, 3, [2, 2, 2], 2, 1.0),
    (9, 2, [3], 3, 0.5),
    (10, 3, [2, 2], 3, 0.7),
    (11, 5, [2], 2, 1.0),
    (12, 2, [5], 2, 1.0),
    (13, 3, [1, 3], 3, 1.0),
    (14, 1, [4, 1], 3, 1.0),
    (15, 3, [3], 6, 1.0),
    (16, 4, [4], 2, 0.8),
    (17, 2, [2, 4], 2, 1.0),
    (18, 3, [3, 1], 4, 1.0),
    (19, 2, [2], 1, 0.6),
    (20, 3, [2, 3, 2], 2, 0.9),
]

RHN_CONFIGS = [
    # (seed, width, depth, steps, embed_dim, coupled_c)
    (0, 3, 1, 3, None, False),
    (1, 3, 2, 3, None, False),
    (2, 2, 3, 2, None, False),
    (3, 4, 2, 2, 3, False),
    (4, 3, 1, 4, 2, True),
    (5, 3, 2, 3, None, True),
    (6, 2, 4, 2, None, True),
    (7, 1, 3, 3, None, False),
    (8, 4, 1, 2, 5, True),
    (9, 3, 3, 2, 2, False),
    (10, 2, 2, 5, None, True),
]


@pytest.mark.parametrize('seed,input_size,hidden,steps,keep', LSTM_CONFIGS)
def test_lstm_gradients(seed, input_size, hidden, steps, keep):
    """Test BPTT gradients of LSTM stacks, with and without dropout masks."""
    params, loss_fn = lstm_problem(seed, input_size, hidden, steps, dropout_keep=keep)
    report = finite_difference_check(params, loss_fn)

    assert report.passed, f"max relative error {report.max_rel_error} at {report.worst_tensor}{report.worst_index}"
    assert report.max_rel_error < 1e-4

@pytest.mark.parametrize('seed,width,depth,steps,embed_dim,coupled', RHN_CONFIGS)
def test_rhn_gradients(seed, width, depth, steps, embed_dim, coupled):
    """Test BPTT gradients of RHN layers through every micro-step."""
    params, loss_fn = rhn_problem(seed, width, depth, steps, embed_dim=embed_dim, coupled_c=coupled)
    report = finite_difference_check(params, loss_fn)

    assert report.max_rel_error < 1e-4

def test_linear_loss_is_exact():
    """Test that a linear loss with its true gradient passes."""
    a = np.array([[1.0, -2.0], [0.5, 3.0]])

    def loss_fn(p):
        return float((a * p['w']).sum()), {'w': a}

    report = finite_difference_check({'w': np.zeros((2, 2))}, loss_fn)

    assert report.passed
    assert report.checked == 4
    assert report.max_rel_error < 1e-8

def test_wrong_gradient_is_detected():
    """Test that a deliberately wrong gradient fails and is located."""
    def loss_fn(p):
        grad = 2 * p['w']
        grad[1] += 0.5
        return float((p['w'] ** 2).sum()), {'w': grad}

    report = finite_difference_check({'w': np.array([1.0, 2.0, 3.0])}, loss_fn)

    assert not report.passed
    assert report.worst_tensor == 'w'
    assert report.worst_index == (1,)

def test_epsilon_range():
    """Test that perturbations outside [1e-6, 1e-4] are rejected."""
    def loss_fn(p):
        return 0.0, {'w': np.zeros(1)}

    with pytest.raises(ParameterError):
        finite_difference_check({'w': np.zeros(1)}, loss_fn, epsilon=1e-3)

def test_non_finite_loss():
    """Test that a non-finite loss raises NumericError."""
    def loss_fn(p):
        return float('nan'), {'w': np.zeros(1)}

    with pytest.raises(NumericError):
        finite_difference_check({'w': np.zeros(1)}, loss_fn)

def test_lstm_language_model_gradients(tokens):
    """Test the full model gradient: embedding, LSTM stack and softmax."""
    model = LstmLanguageModel.create(vocab_size=10, embed_dim=3, hidden_sizes=[3, 2], rng=Rng(0))
    inputs, targets = tokens
    params, loss_fn = model_problem(model, inputs[:3], targets[:3])

    report = finite_difference_check(params, loss_fn, max_entries=30, rng=Rng(1))

    assert report.max_rel_error < 1e-4

@pytest.mark.parametrize('tied', [False, True])
def test_rhn_language_model_gradients(tokens, tied):
    """Test the full RHN model gradient, including a tied output weight."""
    model = RhnLanguageModel.create(vocab_size=10, embed_dim=3, width=3, depth=2, rng=Rng(2), tied=tied)
    inputs, targets = tokens
    params, loss_fn = model_problem(model, inputs[:3], targets[:3])

    report = finite_difference_check(params, loss_fn, max_entries=30, rng=Rng(3))

    assert report.max_rel_error < 1e-4
