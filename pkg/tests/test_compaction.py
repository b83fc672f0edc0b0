"""Tests for planning and applying compaction and for output equivalence."""

import json

import numpy as np
import pytest

from iss_rnn.compaction import (
    CompactionPlan,
    apply_compaction,
    load_plan,
    plan_compaction,
    random_probes,
    save_plan,
    verify_equivalence,
)
from iss_rnn.errors import ConsistencyError, DegenerateLayerError, FormatError
from iss_rnn.models import LstmLanguageModel, RhnLanguageModel
from iss_rnn.numerics import Rng, rng_uniform
from iss_rnn.topology import detect_zero_groups

def _compact(model, weights, zero_tol=0.0):
    sparse = model.with_tensors(weights)
    group_map = sparse.group_map()
    plan = plan_compaction(sparse.tensors, group_map, detect_zero_groups(sparse.tensors, group_map, zero_tol))
    return sparse, plan, apply_compaction(sparse, plan)

def test_identity_plan(toy_lstm):
    """Test that a model without zero groups compacts to itself."""
    sparse, plan, compact = _compact(toy_lstm, dict(toy_lstm.tensors))

    assert plan.is_identity
    assert plan.dropped == [[], []]
    for name, tensor in toy_lstm.tensors.items():
        assert compact.tensors[name].shape == tensor.shape
        assert compact.tensors[name].tobytes() == tensor.tobytes()
    report = verify_equivalence(sparse, compact, plan, random_probes(12, 3, 10, 2, Rng(0)))
    assert report.max_abs_diff == 0.0

def test_drop_one_component_shapes(toy_lstm, zero_groups):
    """Test that dropping one of four components turns (in+4)×16 into (in+3)×12."""
    sparse, plan, compact = _compact(toy_lstm, zero_groups(toy_lstm, 1, [2]))

    assert plan.dropped == [[], [2]]
    assert plan.hidden_sizes == [6, 3]
    assert compact.tensors['lstm_1/weight'].shape == (9, 12)
    assert compact.tensors['lstm_1/bias'].shape == (12,)
    assert compact.tensors['softmax/weight'].shape == (3, 12)
    assert compact.hidden_sizes() == [6, 3]

def test_parameter_accounting_single_group(toy_lstm, zero_groups):
    """Test that removing one component removes its group's weights plus four bias entries."""
    sparse, plan, compact = _compact(toy_lstm, zero_groups(toy_lstm, 0, [2]))
    group_map = toy_lstm.group_map()
    size = group_map.group_size(group_map.groups[0][2], 'unique')

    assert size == 80
    assert sparse.parameter_count() - compact.parameter_count() == size + 4

def test_parameter_accounting_rhn(toy_rhn, zero_groups):
    """Test that removing one RHN unit removes its group's weights and one bias per transform and depth."""
    sparse, plan, compact = _compact(toy_rhn, zero_groups(toy_rhn, 0, [3]))
    group_map = toy_rhn.group_map()
    size = group_map.group_size(group_map.groups[0][3], 'unique')

    assert compact.width == 4
    assert sparse.parameter_count() - compact.parameter_count() == size + 3 * 2

@pytest.mark.parametrize('seed', range(4))
def test_lstm_equivalence_random_groups(toy_lstm, zero_groups, seed):
    """Test bit-exact outputs after removing random exactly-zero groups from both layers."""
    rng = np.random.default_rng(seed)
    dropped0 = sorted(rng.choice(6, size=rng.integers(1, 6), replace=False).tolist())
    dropped1 = sorted(rng.choice(4, size=rng.integers(1, 4), replace=False).tolist())
    weights = zero_groups(toy_lstm, 0, dropped0)
    weights = zero_groups(toy_lstm.with_tensors(weights), 1, dropped1)

    sparse, plan, compact = _compact(toy_lstm, weights)

    assert plan.dropped == [dropped0, dropped1]
    assert plan.hidden_sizes == [6 - len(dropped0), 4 - len(dropped1)]
    report = verify_equivalence(sparse, compact, plan, random_probes(12, 10, 20, 1, Rng(seed)))
    assert report.passed
    assert report.max_hidden_diff == 0.0
    assert report.max_logit_diff == 0.0

def test_lstm_equivalence_hundred_sequences(toy_lstm, zero_groups):
    """Test one removed group over 100 random 20-step sequences."""
    sparse, plan, compact = _compact(toy_lstm, zero_groups(toy_lstm, 0, [3]))

    report = verify_equivalence(sparse, compact, plan, random_probes(12, 100, 20, 1, Rng(7)))

    assert report.probes == 100
    assert report.max_abs_diff == 0.0

@pytest.mark.parametrize('coupled,tied', [(False, False), (True, True), (False, True)])
def test_rhn_equivalence(zero_groups, coupled, tied):
    """Test bit-exact outputs after removing zeroed RHN units."""
    model = RhnLanguageModel.create(9, 5, 5, 3, Rng(2), coupled_c=coupled, tied=tied)
    sparse, plan, compact = _compact(model, zero_groups(model, 0, [0, 3]))

    assert plan.hidden_sizes == [3]
    assert compact.tensors['embedding'].shape == (9, 3)
    report = verify_equivalence(sparse, compact, plan, random_probes(9, 10, 20, 2, Rng(1)))
    assert report.max_abs_diff == 0.0

def test_compacting_twice_gives_identity(toy_lstm, zero_groups):
    """Test that planning on an already compact model keeps everything."""
    _, _, compact = _compact(toy_lstm, zero_groups(toy_lstm, 0, [0, 5]))
    _, plan, again = _compact(compact, dict(compact.tensors))

    assert plan.is_identity
    assert again.hidden_sizes() == [4, 4]

def test_degenerate_layer(toy_lstm, zero_groups):
    """Test that zeroing every component of a layer is refused."""
    weights = zero_groups(toy_lstm, 1, [0, 1, 2, 3])
    with pytest.raises(DegenerateLayerError):
        _compact(toy_lstm, weights)

def test_tolerance_equivalence(toy_lstm, zero_groups):
    """Test near-zero groups removed under a tolerance stay within 1e-6."""
    weights = zero_groups(toy_lstm, 0, [1])
    weights['lstm_0/weight'][:, 1] = 1e-9
    sparse, plan, compact = _compact(toy_lstm, weights, zero_tol=1e-6)

    assert plan.dropped == [[1], []]
    report = verify_equivalence(sparse, compact, plan, random_probes(12, 5, 20, 1, Rng(0)), tol=1e-6)
    assert report.passed

def test_plan_rejects_foreign_report(toy_lstm, zero_groups):
    """Test that a report from other weights is rejected."""
    group_map = toy_lstm.group_map()
    report = detect_zero_groups(zero_groups(toy_lstm, 0, [1]), group_map)

    with pytest.raises(ConsistencyError):
        plan_compaction(toy_lstm.tensors, group_map, report)

def test_apply_rejects_other_model(toy_lstm, zero_groups):
    """Test that a plan for one model cannot be applied to another."""
    _, plan, _ = _compact(toy_lstm, zero_groups(toy_lstm, 0, [1]))
    other = LstmLanguageModel.create(12, 5, [6, 5], Rng(0))

    with pytest.raises(ConsistencyError):
        apply_compaction(other, plan)

def test_compacted_model_keeps_metadata(toy_lstm, zero_groups):
    """Test that the vocabulary travels with the compact model."""
    toy_lstm.metadata['vocab'] = 'abcdefghijkl'
    _, _, compact = _compact(toy_lstm, zero_groups(toy_lstm, 1, [0]))

    assert compact.metadata['vocab'] == 'abcdefghijkl'

def test_plan_save_and_load(tmp_path, toy_lstm, zero_groups):
    """Test that a saved plan loads back equal."""
    _, plan, _ = _compact(toy_lstm, zero_groups(toy_lstm, 0, [2, 4]))
    path = str(tmp_path / 'plan.json')
    save_plan(plan, path)

    loaded = load_plan(path)

    assert loaded.to_json() == plan.to_json()
    assert loaded.kept == [[0, 1, 3, 5], [0, 1, 2, 3]]

def test_plan_malformed(tmp_path):
    """Test that a plan missing fields raises FormatError."""
    path = tmp_path / 'plan.json'
    path.write_text(json.dumps({'kind': 'lstm_stack', 'layers': [{'name': 'lstm_0'}], 'tensors': []}))

    with pytest.raises(FormatError):
        load_plan(str(path))

    with pytest.raises(FormatError):
        CompactionPlan.from_json({'kind': 'rhn'})

def _random_biases(model, seed):
    rng = Rng(seed)
    tensors = dict(model.tensors)
    for name, tensor in model.tensors.items():
        if name.endswith('/bias') or '/b_' in name:
            tensors[name] = rng_uniform(rng, -0.5, 0.5, tensor.shape, tensor.dtype)
    return model.with_tensors(tensors)

@pytest.mark.parametrize('seed', range(3))
def test_lstm_equivalence_nonzero_biases(toy_lstm, zero_groups, seed):
    """Test bit-exact outputs when dropped components carry nonzero biases."""
    model = _random_biases(toy_lstm, 10 + seed)
    weights = zero_groups(model, 0, [1, 4])
    weights = zero_groups(model.with_tensors(weights), 1, [2])

    sparse, plan, compact = _compact(model, weights)

    assert np.abs(sparse.tensors['lstm_0/bias']).min() > 0.0
    assert plan.hidden_sizes == [4, 3]
    report = verify_equivalence(sparse, compact, plan, random_probes(12, 10, 20, 2, Rng(seed)))
    assert report.max_abs_diff == 0.0

@pytest.mark.parametrize('coupled,tied', [(False, False), (True, True)])
def test_rhn_equivalence_nonzero_biases(zero_groups, coupled, tied):
    """Test bit-exact RHN outputs when dropped units carry nonzero biases."""
    model = _random_biases(RhnLanguageModel.create(9, 5, 5, 3, Rng(2), coupled_c=coupled, tied=tied), 21)
    sparse, plan, compact = _compact(model, zero_groups(model, 0, [0, 3]))

    assert plan.hidden_sizes == [3]
    report = verify_equivalence(sparse, compact, plan, random_probes(9, 10, 20, 2, Rng(1)))
    assert report.max_abs_diff == 0.0

def test_dropped_component_ignores_input(toy_lstm, zero_groups):
    """Test that a zeroed component follows the same bias-driven sequence for any input."""
    model = _random_biases(toy_lstm, 5)
    sparse = model.with_tensors(zero_groups(model, 0, [2]))
    first, second = random_probes(12, 2, 15, 1, Rng(8))
    assert not np.array_equal(first, second)

    a, _ = sparse.trace(first, sparse.init_state(1))
    b, _ = sparse.trace(second, sparse.init_state(1))

    dropped_a = np.array([h[0][:, 2] for h in a.hidden])
    dropped_b = np.array([h[0][:, 2] for h in b.hidden])
    np.testing.assert_array_equal(dropped_a, dropped_b)
    assert np.abs(dropped_a).max() > 0.0
    assert not np.array_equal(np.array([h[0][:, 0] for h in a.hidden]), np.array([h[0][:, 0] for h in b.hidden]))

def test_dropped_component_is_zero_without_biases(toy_lstm, zero_groups):
    """Test that with zero biases a zeroed component stays exactly 0."""
    sparse = toy_lstm.with_tensors(zero_groups(toy_lstm, 0, [2]))

    full, _ = sparse.trace(random_probes(12, 1, 15, 3, Rng(8))[0], sparse.init_state(3))

    assert all(not h[0][:, 2].any() for h in full.hidden)
