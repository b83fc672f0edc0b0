"""Text corpora for the character-level language-model task."""

import logging
import math
import os
from dataclasses import dataclass
from typing import Iterator, Optional, Tuple

import numpy as np
import requests
from requests.exceptions import RequestException

from iss_rnn.errors import ParameterError
from iss_rnn.utils import corpus_cache_path

logger = logging.getLogger(__name__)

# Alice's Adventures in Wonderland, public domain.
DEFAULT_CORPUS_URL = 'https://www.gutenberg.org/cache/epub/11/pg11.txt'
DEFAULT_MAX_BYTES = 50_000

# The GNU GPL v3 and FDL v1.3 texts concatenated, about 58 KB of ASCII.
BUNDLED_CORPUS_PATH = os.path.join(os.path.dirname(__file__), 'data', 'corpus.txt')

_START_MARKER = '*** START OF'
_END_MARKER = '*** END OF'


def fetch_corpus(url: str) -> str:
    """
    Download a plain-text corpus.

    Args:
        url (str): URL of the text file.

    Returns:
        str: The decoded text.

    Raises:
        RequestException: If there's an error fetching the text.
    """
    try:
        response = requests.get(url, timeout=30)
        response.raise_for_status()
        response.encoding = response.encoding or 'utf-8'
        return response.text
    except requests.exceptions.Timeout:
        raise RequestException("Timeout while fetching corpus")
    except requests.exceptions.RequestException as e:
        raise RequestException(f"Error fetching corpus: {str(e)}")


def strip_gutenberg_boilerplate(text: str) -> str:
    """Keep only the body between the Project Gutenberg start/end markers, if present."""
    start = text.find(_START_MARKER)
    if start != -1:
        newline = text.find('\n', start)
        text = text[newline + 1:] if newline != -1 else text
    end = text.find(_END_MARKER)
    if end != -1:
        text = text[:end]
    return text.strip()


def load_corpus(
    path: Optional[str] = None,
    url: str = DEFAULT_CORPUS_URL,
    cache_dir: str = 'data',
    max_bytes: Optional[int] = DEFAULT_MAX_BYTES,
    bundled: bool = False,
) -> str:
    """Read a local text file, or download ``url`` once into ``cache_dir``.

    ``bundled`` reads the corpus shipped with the package and never touches
    the network; it cannot be combined with ``path``. The text is cut to its
    first ``max_bytes`` characters.
    """
    if bundled:
        if path is not None:
            raise ParameterError("choose either a corpus path or the bundled corpus, not both")
        path = BUNDLED_CORPUS_PATH
    if path is not None:
        with open(path, encoding='utf-8') as f:
            text = f.read()
    else:
        cached = corpus_cache_path(url, cache_dir)
        if os.path.exists(cached):
            with open(cached, encoding='utf-8') as f:
                text = f.read()
        else:
            logger.info("Downloading corpus from %s", url)
            text = strip_gutenberg_boilerplate(fetch_corpus(url))
            os.makedirs(cache_dir, exist_ok=True)
            with open(cached, 'w', encoding='utf-8') as f:
                f.write(text)
    if max_bytes is not None:
        text = text[:max_bytes]
    if len(text) < 2:
        raise ParameterError("corpus must contain at least two characters")
    return text


@dataclass
class CharCorpus:
    vocab: str
    train: np.ndarray
    valid: np.ndarray

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def encode(self, text: str) -> np.ndarray:
        index = {ch: i for i, ch in enumerate(self.vocab)}
        try:
            return np.array([index[ch] for ch in text], dtype=np.int64)
        except KeyError as e:
            raise ParameterError(f"character {e} is not in the vocabulary")

    def decode(self, ids: np.ndarray) -> str:
        return ''.join(self.vocab[i] for i in ids)


def build_char_corpus(text: str, valid_fraction: float = 0.1, vocab: Optional[str] = None) -> CharCorpus:
    """Split ``text`` into a training head and a validation tail over one vocabulary."""
    if not 0.0 < valid_fraction < 1.0:
        raise ParameterError(f"valid_fraction must be in (0, 1), got {valid_fraction}")
    vocab = vocab if vocab is not None else ''.join(sorted(set(text)))
    corpus = CharCorpus(vocab, np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64))
    ids = corpus.encode(text)
    split = int(round(len(ids) * (1.0 - valid_fraction)))
    if split < 2 or len(ids) - split < 2:
        raise ParameterError("corpus is too short to split into training and validation parts")
    corpus.train, corpus.valid = ids[:split], ids[split:]
    return corpus


def batchify(ids: np.ndarray, batch_size: int) -> np.ndarray:
    """Lay ``ids`` out as ``batch_size`` parallel streams: a [steps × batch] array."""
    if batch_size < 1:
        raise ParameterError(f"batch size must be positive, got {batch_size}")
    steps = len(ids) // batch_size
    if steps < 2:
        raise ParameterError(f"{len(ids)} tokens are too few for batch size {batch_size}")
    return np.asarray(ids[: steps * batch_size]).reshape(batch_size, steps).T


def iterate_windows(batches: np.ndarray, unroll_steps: int) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """Yield (inputs, targets) windows of at most ``unroll_steps`` steps; targets are inputs shifted by one."""
    if unroll_steps < 1:
        raise ParameterError(f"unroll_steps must be positive, got {unroll_steps}")
    for start in range(0, batches.shape[0] - 1, unroll_steps):
        stop = min(start + unroll_steps, batches.shape[0] - 1)
        yield batches[start:stop], batches[start + 1: stop + 1]


def unigram_perplexity(train_ids: np.ndarray, eval_ids: np.ndarray, vocab_size: int) -> float:
    """Perplexity of an add-one smoothed unigram model fit on ``train_ids``."""
    counts = np.bincount(train_ids, minlength=vocab_size).astype(np.float64) + 1.0
    logp = np.log(counts / counts.sum())
    return float(math.exp(-logp[eval_ids].mean()))
