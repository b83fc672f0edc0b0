"""Test configuration and fixtures."""

import pytest
from unittest.mock import Mock

from iss_rnn.corpus import build_char_corpus
from iss_rnn.models import LstmLanguageModel, RhnLanguageModel
from iss_rnn.numerics import Rng

SAMPLE_TEXT = (
    "Alice was beginning to get very tired of sitting by her sister on the bank, "
    "and of having nothing to do: once or twice she had peeped into the book her "
    "sister was reading, but it had no pictures or conversations in it, and what "
    "is the use of a book, thought Alice, without pictures or conversations? "
) * 6


def pytest_addoption(parser):
    parser.addoption('--runslow', action='store_true', default=False, help='also run the minutes-long training and timing checks')


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: trains real models or times large products; needs --runslow')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow'):
        return
    skip_slow = pytest.mark.skip(reason='needs --runslow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def mock_response():
    """Create a mock response object."""
    response = Mock()
    response.text = SAMPLE_TEXT
    response.encoding = 'utf-8'
    response.status_code = 200
    response.raise_for_status.return_value = None
    return response


@pytest.fixture
def sample_settings(tmp_path):
    """Return runtime settings pointing at a temporary data directory."""
    return {
        'THREADS': 1,
        'LOG_LEVEL': 'INFO',
        'DATA_DIR': str(tmp_path / 'data'),
        'CORPUS_URL': 'http://corpus.example.com/alice.txt',
    }


@pytest.fixture
def sample_text():
    """Return a short paragraph repeated a few times."""
    return SAMPLE_TEXT


@pytest.fixture
def corpus_file(tmp_path):
    """Write the sample text to a file and return its path."""
    path = tmp_path / 'alice.txt'
    path.write_text(SAMPLE_TEXT, encoding='utf-8')
    return str(path)


@pytest.fixture
def tiny_corpus():
    """Return a character corpus built from the sample text."""
    return build_char_corpus(SAMPLE_TEXT, valid_fraction=0.2)


@pytest.fixture
def toy_lstm():
    """Return a small two-layer LSTM language model over 12 symbols."""
    return LstmLanguageModel.create(vocab_size=12, embed_dim=5, hidden_sizes=[6, 4], rng=Rng(3))


@pytest.fixture
def toy_rhn():
    """Return a small untied RHN language model with independent carry transforms."""
    return RhnLanguageModel.create(vocab_size=10, embed_dim=5, width=5, depth=2, rng=Rng(4))


@pytest.fixture
def tokens():
    """Return inputs and targets of shape [6 steps × 3 streams] over 10 symbols."""
    ids = Rng(11).integers(10, size=21).reshape(7, 3)
    return ids[:-1], ids[1:]


def zero_components(model, layer, components):
    """Return a copy of the model's tensors with the ISS groups of ``components`` of ``layer`` zeroed."""
    group_map = model.group_map()
    tensors = {name: t.copy() for name, t in model.tensors.items()}
    for k in components:
        group = group_map.groups[layer][k]
        for tensor_id, (rows, cols) in group.rows_and_cols().items():
            tensors[tensor_id][rows, :] = 0
            tensors[tensor_id][:, cols] = 0
    return tensors


@pytest.fixture
def zero_groups():
    """Expose the group zeroing helper to tests."""
    return zero_components
