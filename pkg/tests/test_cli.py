"""Tests for the CLI module."""

import csv
import json
import os
import struct

import pytest
from unittest.mock import patch

from iss_rnn.bench import BenchCase
from iss_rnn.cli import cli_dispatch, main
from iss_rnn.gradcheck import GradCheckReport
from iss_rnn.models import LstmLanguageModel
from iss_rnn.numerics import Rng
from iss_rnn.serialization import load_model, save_model


@pytest.fixture
def settings(sample_settings):
    """Patch the environment-backed settings for the duration of a test."""
    with patch('iss_rnn.cli.load_settings') as mock_load_settings:
        mock_load_settings.return_value = sample_settings
        yield mock_load_settings


@pytest.fixture
def model_path(tmp_path, toy_lstm):
    """Save the toy LSTM and return its path."""
    path = str(tmp_path / 'model.issm')
    save_model(toy_lstm, path)
    return path


@pytest.fixture
def sparse_model_path(tmp_path, toy_lstm, zero_groups):
    """Save the toy LSTM with components 1 and 2 of its first layer zeroed."""
    path = str(tmp_path / 'sparse.issm')
    save_model(toy_lstm.with_tensors(zero_groups(toy_lstm, 0, [1, 2])), path)
    return path


@pytest.fixture
def char_model_path(tmp_path, sample_text):
    """Save a small character model that carries its vocabulary."""
    vocab = ''.join(sorted(set(sample_text)))
    model = LstmLanguageModel.create(vocab_size=len(vocab), embed_dim=5, hidden_sizes=[6], rng=Rng(0))
    model.metadata['vocab'] = vocab
    path = str(tmp_path / 'char.issm')
    save_model(model, path)
    return path


def _read_csv(path):
    with open(path, newline='') as f:
        return list(csv.DictReader(f))


def test_main_success(settings, model_path, tmp_path):
    """Test successful execution of the main function."""
    out = str(tmp_path / 'groups.json')

    with patch('sys.argv', ['iss-rnn', 'export-groups', model_path, '--out', out]), \
         patch('sys.exit') as mock_exit:
        main()

    settings.assert_called_once()
    mock_exit.assert_called_once_with(0)
    with open(out) as f:
        document = json.load(f)
    assert [len(layer['groups']) for layer in document['layers']] == [6, 4]


def test_main_usage_error(settings):
    """Test that argument errors exit with code 2."""
    with patch('sys.argv', ['iss-rnn', 'prune']), patch('sys.exit') as mock_exit:
        main()

    mock_exit.assert_called_once_with(2)


def test_main_missing_config():
    """Test main function with an invalid environment."""
    with patch('iss_rnn.cli.load_settings') as mock_load_settings, \
         patch('sys.argv', ['iss-rnn', 'gradcheck']), \
         patch('sys.exit') as mock_exit:
        mock_load_settings.side_effect = ValueError("Invalid value for environment variable ISS_RNN_THREADS: 0")

        main()

    mock_exit.assert_called_once_with(1)


def test_missing_model_file(settings, tmp_path, capsys):
    """Test that an unreadable model file is an error, not a crash."""
    code = cli_dispatch(['analyze', str(tmp_path / 'absent.issm')])

    assert code == 1
    assert capsys.readouterr().err.startswith('Error:')


def test_invalid_threads(settings, model_path):
    """Test that --threads below one is a usage error."""
    assert cli_dispatch(['--threads', '0', 'export-groups', model_path]) == 2


def test_unexpected_error(settings, model_path, capsys):
    """Test that unexpected exceptions exit with code 1."""
    with patch('iss_rnn.cli.export_group_map') as mock_export:
        mock_export.side_effect = RuntimeError("disk on fire")
        code = cli_dispatch(['export-groups', model_path])

    assert code == 1
    assert 'Unexpected error: disk on fire' in capsys.readouterr().err


def test_manifest_missing_shape(settings, model_path, capsys):
    """Test that a manifest entry without a shape is reported by tensor index."""
    with open(model_path, 'rb') as f:
        blob = f.read()
    (length,) = struct.unpack_from('<I', blob)
    manifest = json.loads(blob[4:4 + length])
    del manifest['tensors'][0]['shape']
    encoded = json.dumps(manifest).encode('utf-8')
    with open(model_path, 'wb') as f:
        f.write(struct.pack('<I', len(encoded)) + encoded + blob[4 + length:])

    code = cli_dispatch(['analyze', model_path])

    assert code == 1
    assert "Error: tensor 0: missing 'shape'" in capsys.readouterr().err


def test_eval_corpus_and_bundled_conflict(settings, char_model_path, corpus_file, capsys):
    """Test that --corpus and --bundled-corpus together are refused."""
    code = cli_dispatch(['eval', char_model_path, '--corpus', corpus_file, '--bundled-corpus'])

    assert code == 1
    assert 'not both' in capsys.readouterr().err


def test_analyze(settings, sparse_model_path, tmp_path, capsys):
    """Test the sparsity, histogram and tensor reports."""
    out_dir = str(tmp_path / 'reports')

    code = cli_dispatch(['analyze', sparse_model_path, '--out-dir', out_dir, '--bins', '5'])

    assert code == 0
    layers = _read_csv(os.path.join(out_dir, 'sparsity.csv'))
    assert [(r['total_components'], r['zero_components']) for r in layers] == [('6', '2'), ('4', '0')]
    assert len(_read_csv(os.path.join(out_dir, 'histogram.csv'))) == 2 * 5
    tensors = {r['tensor_id']: r for r in _read_csv(os.path.join(out_dir, 'tensors.csv'))}
    assert int(tensors['lstm_0/bias']['after']) == 4 * 4
    assert len({r['config_fingerprint'] for r in layers}) == 1
    assert '2 of 6 components zero' in capsys.readouterr().out


def test_compact(settings, sparse_model_path, tmp_path):
    """Test compaction of a model with zero groups, plan and equivalence report included."""
    out = str(tmp_path / 'compact.issm')
    plan = str(tmp_path / 'plan.json')
    report = str(tmp_path / 'equivalence.json')

    code = cli_dispatch([
        'compact', sparse_model_path, '--out', out, '--plan', plan, '--report', report,
        '--probes', '3', '--probe-steps', '5',
    ])

    assert code == 0
    assert load_model(out).hidden_sizes() == [4, 4]
    with open(report) as f:
        equivalence = json.load(f)
    assert equivalence['passed'] is True
    assert equivalence['max_abs_diff'] == 0.0
    assert equivalence['parameters_after'] < equivalence['parameters_before']
    with open(plan) as f:
        assert [len(layer['kept']) for layer in json.load(f)['layers']] == [4, 4]


def test_compact_without_zero_groups(settings, model_path, tmp_path, capsys):
    """Test that a dense model cannot be compacted without a tolerance."""
    code = cli_dispatch(['compact', model_path, '--out', str(tmp_path / 'c.issm')])

    assert code == 2
    assert 'no exactly-zero ISS groups' in capsys.readouterr().err


def test_eval(settings, char_model_path, corpus_file, capsys):
    """Test perplexity evaluation on a local corpus."""
    code = cli_dispatch(['eval', char_model_path, '--corpus', corpus_file, '--batch-size', '2'])

    assert code == 0
    assert 'Perplexity (valid):' in capsys.readouterr().out


def test_eval_without_vocabulary(settings, model_path, corpus_file):
    """Test that a model without a stored vocabulary cannot be evaluated on text."""
    assert cli_dispatch(['eval', model_path, '--corpus', corpus_file]) == 2


def test_calibrate_tau(settings, char_model_path, corpus_file, capsys):
    """Test threshold calibration on a local corpus."""
    code = cli_dispatch(['calibrate-tau', char_model_path, '--corpus', corpus_file, '--grid', '0,0.001'])

    output = capsys.readouterr().out
    assert code == 0
    assert 'tau=0.001' in output
    assert 'Chosen tau' in output


@pytest.mark.parametrize('kind', ['lstm', 'rhn'])
def test_gradcheck(settings, kind, capsys):
    """Test the cell gradient check on a couple of configurations."""
    code = cli_dispatch(['gradcheck', '--kind', kind, '--configs', '2', '--steps', '3'])

    output = capsys.readouterr().out
    assert code == 0
    assert 'in 2 configurations' in output


def test_gradcheck_saved_model(settings, model_path):
    """Test the gradient check of a saved model."""
    assert cli_dispatch(['gradcheck', '--model', model_path, '--steps', '3']) == 0


def test_gradcheck_failure(settings, capsys):
    """Test that a failed gradient check exits with code 1."""
    failing = GradCheckReport(checked=4, max_rel_error=0.5, worst_tensor='W', worst_index=(1,), tol=1e-4)
    with patch('iss_rnn.cli.finite_difference_check') as mock_check:
        mock_check.return_value = failing
        code = cli_dispatch(['gradcheck', '--configs', '1'])

    assert code == 1
    assert 'gradient check failed' in capsys.readouterr().err


def test_train(settings, corpus_file, tmp_path):
    """Test a one-epoch training run on a local corpus."""
    out = str(tmp_path / 'trained.issm')
    metrics = str(tmp_path / 'metrics.csv')

    code = cli_dispatch([
        'train', '--corpus', corpus_file, '--epochs', '1', '--hidden', '8',
        '--lambda', '0.001', '--out', out, '--metrics', metrics,
    ])

    assert code == 0
    model = load_model(out)
    assert model.hidden_sizes() == [8]
    assert 'vocab' in model.metadata
    rows = _read_csv(metrics)
    assert len(rows) == 1
    assert rows[0]['reg_mode'] == 'group_lasso'
    assert rows[0]['threshold_order'] == 'after_update'


def test_bench(settings, tmp_path):
    """Test that the benchmark writes one CSV row per case."""
    out = str(tmp_path / 'bench.csv')
    cases = [BenchCase(8, 8, 2, s) for s in (0.0, 0.5)]

    with patch('iss_rnn.cli.default_cases') as mock_cases:
        mock_cases.return_value = cases
        code = cli_dispatch(['bench', '--sparsity', '0,0.5', '--out', out])

    assert code == 0
    mock_cases.assert_called_once_with(
        full_shapes=False, sparsities=[0.0, 0.5], repetitions=10, warmup=3, threads=1, kernel='blas'
    )
    assert [r['s'] for r in _read_csv(out)] == ['0.0', '0.5']


def test_experiment(settings, corpus_file, tmp_path):
    """Test that experiment rows are written with the config fingerprint."""
    out = str(tmp_path / 'experiment.csv')

    with patch('iss_rnn.cli.run_experiment') as mock_run:
        mock_run.return_value = [{'run': 'lambda=0', 'valid_ppl': 5.0}]
        code = cli_dispatch(['experiment', '--kind', 'lambda-sweep', '--corpus', corpus_file, '--out', out])

    assert code == 0
    kind, cfg, corpus = mock_run.call_args[0]
    assert kind == 'lambda-sweep'
    assert cfg.data.path == corpus_file
    assert _read_csv(out)[0]['config_fingerprint'] == cfg.fingerprint


def test_train_is_deterministic(settings, corpus_file, tmp_path):
    """Test that two runs with the same seed write identical metrics."""
    outputs = []
    for run in ('a', 'b'):
        metrics = str(tmp_path / f'metrics-{run}.csv')
        code = cli_dispatch([
            'train', '--corpus', corpus_file, '--epochs', '1', '--hidden', '6', '--lambda', '0', '--tau', '0',
            '--seed', '7', '--out', str(tmp_path / f'model-{run}.issm'), '--metrics', metrics,
        ])
        assert code == 0
        with open(metrics) as f:
            outputs.append(f.read())

    assert outputs[0] == outputs[1]


def test_compact_then_eval(settings, char_model_path, corpus_file, tmp_path, zero_groups, capsys):
    """Test that a compacted model evaluates to the same perplexity as the original."""
    model = load_model(char_model_path)
    sparse = model.with_tensors(zero_groups(model, 0, [0, 3]))
    sparse_path = str(tmp_path / 'sparse-char.issm')
    compact_path = str(tmp_path / 'compact-char.issm')
    save_model(sparse, sparse_path)

    assert cli_dispatch([
        'compact', sparse_path, '--out', compact_path, '--plan', str(tmp_path / 'p.json'),
        '--report', str(tmp_path / 'r.json'), '--probes', '2', '--probe-steps', '4',
    ]) == 0
    capsys.readouterr()
    results = []
    for path in (sparse_path, compact_path):
        assert cli_dispatch(['eval', path, '--corpus', corpus_file, '--batch-size', '2']) == 0
        results.append(float(capsys.readouterr().out.split(':')[-1]))

    assert load_model(compact_path).hidden_sizes() == [4]
    assert abs(results[0] - results[1]) <= 1e-6
