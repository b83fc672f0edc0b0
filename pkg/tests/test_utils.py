import csv
import os

import pytest
from iss_rnn.utils import append_csv_row, config_fingerprint, corpus_cache_path, hash_url, write_csv_report

def test_hash_url_known_digest():
    """Test the SHA1 digest of a str and of the same bytes."""
    assert hash_url("abc") == 'a9993e364706816aba3e25717850c26c9cd0d89d'
    assert hash_url(b"abc") == hash_url("abc")

def test_hash_url_invalid_type():
    """Test hashing with invalid input type."""
    with pytest.raises(TypeError) as exc_info:
        hash_url(123)  # type: ignore

    assert "URL must be a string or bytes" in str(exc_info.value)

def test_corpus_cache_path(tmp_path):
    """Test that different corpus URLs get different cache files under the cache directory."""
    first = corpus_cache_path("https://example.com/corpus1.txt", str(tmp_path))
    second = corpus_cache_path("https://example.com/corpus2.txt", str(tmp_path))

    assert first != second
    assert os.path.dirname(first) == str(tmp_path)
    assert os.path.basename(first).startswith('corpus-') and first.endswith('.txt')
    assert len(os.path.basename(first)) == len('corpus-') + 12 + len('.txt')

def test_config_fingerprint_ignores_key_order():
    """Test that the fingerprint depends on content, not key order."""
    a = {'reg': {'lambda': 0.001, 'tau': 0.0001}, 'seed': 3}
    b = {'seed': 3, 'reg': {'tau': 0.0001, 'lambda': 0.001}}

    assert config_fingerprint(a) == config_fingerprint(b)
    assert len(config_fingerprint(a)) == 40

def test_config_fingerprint_changes_with_values():
    """Test that changing any value changes the fingerprint."""
    assert config_fingerprint({'lambda': 0.001}) != config_fingerprint({'lambda': 0.002})

def test_write_csv_report(tmp_path):
    """Test that reports carry a header and the fingerprint on every row."""
    path = tmp_path / 'reports' / 'sparsity.csv'
    rows = [
        {'layer': 'lstm_0', 'zero_components': 3},
        {'layer': 'lstm_1', 'zero_components': 5},
    ]
    write_csv_report(str(path), rows, 'abc123')

    with open(path, newline='') as f:
        read = list(csv.DictReader(f))

    assert [r['layer'] for r in read] == ['lstm_0', 'lstm_1']
    assert [r['zero_components'] for r in read] == ['3', '5']
    assert all(r['config_fingerprint'] == 'abc123' for r in read)

def test_write_csv_report_empty_rows(tmp_path):
    """Test that an empty report still gets a header."""
    path = tmp_path / 'empty.csv'
    write_csv_report(str(path), [], 'abc123', fieldnames=['layer'])

    assert path.read_text().strip() == 'layer,config_fingerprint'

def test_append_csv_row_writes_header_once(tmp_path):
    """Test that appending rows writes the header only for a new file."""
    path = str(tmp_path / 'metrics.csv')
    append_csv_row(path, {'epoch': 0, 'valid_ppl': 12.5}, 'fp')
    append_csv_row(path, {'epoch': 1, 'valid_ppl': 11.0}, 'fp')

    with open(path, newline='') as f:
        lines = f.read().splitlines()

    assert lines[0] == 'epoch,valid_ppl,config_fingerprint'
    assert lines[1:] == ['0,12.5,fp', '1,11.0,fp']
