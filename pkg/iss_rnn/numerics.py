"""Dense matrix kernels and the seeded random number generator.

Matrices are plain row-major ``numpy`` arrays. Training runs in float32; a
float64 copy of any model is used for finite-difference checks.
"""

from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Dict, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from iss_rnn.errors import ParameterError, ShapeError

Matrix = np.ndarray

# Inner-dimension panel width and row-tile height used by gemm.
BLOCK_SIZE = 64

_UNARY: Dict[str, Callable[[np.ndarray], np.ndarray]] = {
    'sigmoid': expit,
    'tanh': np.tanh,
}
_BINARY: Dict[str, Callable[[np.ndarray, np.ndarray], np.ndarray]] = {
    'add': np.add,
    'mul': np.multiply,
}


def as_matrix(value: Union[np.ndarray, Sequence], name: str = 'matrix') -> Matrix:
    """Validate that ``value`` is a non-empty 2-D floating point array.

    Args:
        value: Array-like to check. Integer input is promoted to float32.
        name: Label used in error messages.

    Returns:
        Matrix: The value as an ndarray (no copy when already valid).

    Raises:
        ShapeError: If the value is not 2-D or has an empty dimension.
    """
    array = np.asarray(value)
    if not np.issubdtype(array.dtype, np.floating):
        array = array.astype(np.float32)
    if array.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {array.shape}")
    if array.shape[0] < 1 or array.shape[1] < 1:
        raise ShapeError(f"{name} must have at least one row and column, got {array.shape}")
    return array


def gemm(a: Matrix, b: Matrix, threads: int = 1, block: int = BLOCK_SIZE) -> Matrix:
    """Multiply ``a`` [m×k] by ``b`` [k×n].

    The inner dimension is reduced sequentially, p = 0..k-1, as rank-1
    updates over panels of ``block`` columns of ``a``. Output rows are tiled
    in blocks of ``block`` rows and tiles are spread over ``threads`` workers.
    Every output entry therefore sees the same summation order whatever the
    thread count, and dropping rows of ``b`` that are exactly zero leaves the
    surviving sums bit-identical.

    Args:
        a: Left operand.
        b: Right operand.
        threads: Worker count for row tiles.
        block: Panel and tile size.

    Returns:
        Matrix: The product, in the promoted dtype of the operands.

    Raises:
        ShapeError: If ``a.cols != b.rows``.
        ParameterError: If ``threads`` or ``block`` is less than 1.
    """
    a = as_matrix(a, 'left operand')
    b = as_matrix(b, 'right operand')
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    if threads < 1 or block < 1:
        raise ParameterError("threads and block must be at least 1")

    dtype = np.result_type(a, b)
    rows, inner = a.shape
    out = np.zeros((rows, b.shape[1]), dtype=dtype)

    def _tile(start: int) -> None:
        stop = min(start + block, rows)
        acc = out[start:stop]
        for p0 in range(0, inner, block):
            p1 = min(p0 + block, inner)
            # transposed panel: each row is one contiguous column of ``a``
            panel = np.ascontiguousarray(a[start:stop, p0:p1].T, dtype=dtype)
            for offset in range(p1 - p0):
                acc += panel[offset][:, None] * b[p0 + offset]

    starts = range(0, rows, block)
    if threads == 1 or rows <= block:
        for start in starts:
            _tile(start)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(_tile, starts))
    return out


def elementwise(op: str, *args: np.ndarray) -> np.ndarray:
    """Apply ``add``, ``mul``, ``sigmoid`` or ``tanh`` element by element.

    Raises:
        ParameterError: If the op is unknown or the arity is wrong.
        ShapeError: If binary operands differ in shape.
    """
    if op in _UNARY:
        if len(args) != 1:
            raise ParameterError(f"{op} takes one argument, got {len(args)}")
        return _UNARY[op](np.asarray(args[0]))
    if op in _BINARY:
        if len(args) != 2:
            raise ParameterError(f"{op} takes two arguments, got {len(args)}")
        left, right = np.asarray(args[0]), np.asarray(args[1])
        if left.shape != right.shape:
            raise ShapeError(f"{op} operands differ in shape: {left.shape} vs {right.shape}")
        return _BINARY[op](left, right)
    raise ParameterError(f"Unknown elementwise op: {op}")


class Rng:
    """Counter-based (Philox) random stream.

    The same ``seed`` and ``stream`` always produce the same values, and
    distinct streams of one seed are independent, so parallel setup code can
    take ``rng.child(i)`` without coordination.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed)
        self.stream = int(stream)
        sequence = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, self.stream])
        self.generator = np.random.Generator(np.random.Philox(sequence))

    def child(self, stream: int) -> 'Rng':
        return Rng(self.seed, stream)

    def bernoulli(self, keep: float, shape: Tuple[int, ...], dtype=np.float32) -> np.ndarray:
        """Inverted dropout mask: ``1/keep`` with probability ``keep``, else 0."""
        if not 0.0 < keep <= 1.0:
            raise ParameterError(f"keep probability must be in (0, 1], got {keep}")
        if keep == 1.0:
            return np.ones(shape, dtype=dtype)
        draws = self.generator.random(shape)
        return np.where(draws < keep, 1.0 / keep, 0.0).astype(dtype)

    def integers(self, high: int, size: Optional[int] = None) -> np.ndarray:
        return self.generator.integers(0, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)


def rng_uniform(rng: Rng, lo: float, hi: float, shape: Tuple[int, ...], dtype=np.float32) -> np.ndarray:
    """Draw an array with entries in ``[lo, hi)``.

    Raises:
        ParameterError: If ``lo >= hi`` or the range is empty at ``dtype``.
    """
    if not lo < hi:
        raise ParameterError(f"uniform range requires lo < hi, got [{lo}, {hi})")
    low, high = np.asarray(lo, dtype=dtype), np.asarray(hi, dtype=dtype)
    if not low < high:
        raise ParameterError(f"uniform range [{lo}, {hi}) is empty at {np.dtype(dtype).name}")
    values = (lo + (hi - lo) * rng.generator.random(shape)).astype(dtype)
    # rounding to ``dtype`` can land on hi
    return np.clip(values, low, np.nextafter(high, low))
