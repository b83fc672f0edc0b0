"""Dense vs CSR vs structurally shrunk GEMM micro-benchmark.

Each case multiplies an LSTM-shaped weight W [4h × (in+h)] by X [(in+h) ×
batch] three ways: the dense product, the product with W randomly sparsified
to level s and stored as CSR, and the dense product with W shrunk by removing
k components (``row_ratio`` rows and ``col_ratio`` columns per component) so
that the removed parameter fraction matches s.
"""

import logging
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from iss_rnn.errors import ConsistencyError, FormatError, ParameterError, ShapeError
from iss_rnn.numerics import Rng, as_matrix, gemm, rng_uniform

logger = logging.getLogger(__name__)

ROW_CHUNK = 256
KERNELS = ('blas', 'blocked')


@dataclass
class CsrMatrix:
    rows: int
    cols: int
    row_ptr: np.ndarray
    col_idx: np.ndarray
    values: np.ndarray

    @property
    def nnz(self) -> int:
        return int(self.values.size)

    @classmethod
    def from_dense(cls, dense: np.ndarray) -> 'CsrMatrix':
        dense = as_matrix(dense, 'dense matrix')
        rows, cols = np.nonzero(dense)
        row_ptr = np.zeros(dense.shape[0] + 1, dtype=np.int64)
        np.cumsum(np.bincount(rows, minlength=dense.shape[0]), out=row_ptr[1:])
        return cls(dense.shape[0], dense.shape[1], row_ptr, cols.astype(np.int64), dense[rows, cols].copy())

    def validate(self) -> None:
        """Raise FormatError unless the arrays describe a well-formed CSR matrix."""
        if self.rows < 0 or self.cols < 0:
            raise FormatError(f"CSR dimensions must be non-negative, got {self.rows}×{self.cols}")
        if self.row_ptr.shape != (self.rows + 1,):
            raise FormatError(f"row_ptr must have {self.rows + 1} entries, got {self.row_ptr.size}")
        if self.row_ptr[0] != 0 or np.any(np.diff(self.row_ptr) < 0):
            raise FormatError("row_ptr must start at 0 and be nondecreasing")
        if not self.row_ptr[-1] == self.col_idx.size == self.values.size:
            raise FormatError(
                f"row_ptr ends at {self.row_ptr[-1]} but there are {self.col_idx.size} column indices "
                f"and {self.values.size} values"
            )
        if self.col_idx.size and (self.col_idx.min() < 0 or self.col_idx.max() >= self.cols):
            raise FormatError(f"column indices must lie in [0, {self.cols})")

    def to_dense(self) -> np.ndarray:
        self.validate()
        dense = np.zeros((self.rows, self.cols), dtype=self.values.dtype if self.values.size else np.float32)
        rows = np.repeat(np.arange(self.rows), np.diff(self.row_ptr))
        dense[rows, self.col_idx] = self.values
        return dense


def sparsify_random(weights: np.ndarray, sparsity: float, rng: Rng) -> np.ndarray:
    """Zero exactly round(s·rows·cols) entries at uniformly random positions."""
    if not 0.0 <= sparsity < 1.0:
        raise ParameterError(f"sparsity must be in [0, 1), got {sparsity}")
    out = np.array(weights, copy=True)
    count = int(round(sparsity * out.size))
    if count:
        out.flat[rng.generator.choice(out.size, size=count, replace=False)] = 0
    return out


def _csr_rows(csr: CsrMatrix, x: np.ndarray, out: np.ndarray, start: int, stop: int) -> None:
    lo, hi = int(csr.row_ptr[start]), int(csr.row_ptr[stop])
    if hi == lo:
        return
    products = csr.values[lo:hi, None] * x[csr.col_idx[lo:hi]]
    nonempty = np.flatnonzero(np.diff(csr.row_ptr[start: stop + 1]))
    # one segment per nonempty row
    out[start + nonempty] = np.add.reduceat(products, csr.row_ptr[start:stop][nonempty] - lo, axis=0)


def spmm_csr(csr: CsrMatrix, x: np.ndarray, threads: int = 1) -> np.ndarray:
    """Multiply a CSR matrix by a dense matrix, row block by row block.

    Raises:
        FormatError: If ``csr`` is malformed.
        ShapeError: If ``x`` does not have ``csr.cols`` rows.
    """
    csr.validate()
    x = as_matrix(x, 'dense operand')
    if x.shape[0] != csr.cols:
        raise ShapeError(f"cannot multiply CSR {csr.rows}×{csr.cols} by {x.shape}")
    dtype = np.result_type(csr.values, x) if csr.nnz else x.dtype
    out = np.zeros((csr.rows, x.shape[1]), dtype=dtype)
    starts = list(range(0, csr.rows, ROW_CHUNK))

    def _run(start: int) -> None:
        _csr_rows(csr, x, out, start, min(start + ROW_CHUNK, csr.rows))

    if threads <= 1 or len(starts) == 1:
        for start in starts:
            _run(start)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(_run, starts))
    return out


@dataclass
class BenchCase:
    hidden: int
    input: int
    batch: int
    sparsity: float
    repetitions: int = 10
    warmup: int = 3
    threads: int = 1
    row_ratio: int = 4
    col_ratio: int = 2
    seed: int = 0
    kernel: str = 'blas'

    def __post_init__(self):
        if min(self.hidden, self.input, self.batch) < 1:
            raise ParameterError("hidden, input and batch sizes must be positive")
        if not 0.0 <= self.sparsity < 1.0:
            raise ParameterError(f"sparsity must be in [0, 1), got {self.sparsity}")
        if self.kernel not in KERNELS:
            raise ParameterError(f"kernel must be one of {KERNELS}, got {self.kernel!r}")

    @property
    def weight_shape(self):
        return (4 * self.hidden, self.input + self.hidden)

    @property
    def case_id(self) -> str:
        return f"h{self.hidden}-in{self.input}-b{self.batch}-s{self.sparsity:g}"


@dataclass
class ShrinkResult:
    k: int
    rows: int
    cols: int
    fraction: float


def _shrunk(case: BenchCase, k: int) -> ShrinkResult:
    rows, cols = case.weight_shape
    new_rows, new_cols = rows - case.row_ratio * k, cols - case.col_ratio * k
    return ShrinkResult(k, new_rows, new_cols, 1.0 - (new_rows * new_cols) / (rows * cols))


def structured_shrink(case: BenchCase, k: Optional[int] = None) -> ShrinkResult:
    """Shapes left after removing ``k`` components, or the smallest k reaching ``case.sparsity``.

    Raises:
        ParameterError: If ``k`` would remove every row or column, or no valid
            k reaches the target fraction.
    """
    rows, cols = case.weight_shape
    limit = min((rows - 1) // case.row_ratio, (cols - 1) // case.col_ratio)
    if k is not None:
        if not 0 <= k <= limit:
            raise ParameterError(f"k must be in [0, {limit}] for W of shape {rows}×{cols}, got {k}")
        return _shrunk(case, k)
    for candidate in range(limit + 1):
        result = _shrunk(case, candidate)
        if result.fraction >= case.sparsity:
            return result
    raise ParameterError(
        f"removal fraction {case.sparsity} is unreachable for W of shape {rows}×{cols}; "
        f"the maximum is {_shrunk(case, limit).fraction:.4f}"
    )


@dataclass
class BenchResult:
    case: BenchCase
    k: int
    csr_fraction: float
    structured_fraction: float
    structured_shape: tuple
    dense_ms: float
    csr_ms: float
    structured_ms: float

    @property
    def csr_speedup(self) -> float:
        return self.dense_ms / self.csr_ms

    @property
    def structured_speedup(self) -> float:
        return self.dense_ms / self.structured_ms

    def row(self) -> Dict:
        rows, cols = self.case.weight_shape
        return {
            'case_id': self.case.case_id,
            'shape': f"{rows}x{cols}x{self.case.batch}",
            's': self.case.sparsity,
            'k': self.k,
            'structured_shape': f"{self.structured_shape[0]}x{self.structured_shape[1]}",
            'csr_fraction': round(self.csr_fraction, 6),
            'structured_fraction': round(self.structured_fraction, 6),
            'threads': self.case.threads,
            'kernel': self.case.kernel,
            'dense_ms': round(self.dense_ms, 4),
            'csr_ms': round(self.csr_ms, 4),
            'structured_ms': round(self.structured_ms, 4),
            'csr_speedup': round(self.csr_speedup, 4),
            'structured_speedup': round(self.structured_speedup, 4),
        }


@dataclass
class BenchReport:
    results: List[BenchResult] = field(default_factory=list)

    def rows(self) -> List[Dict]:
        return [r.row() for r in self.results]


def median_ms(fn: Callable[[], object], repetitions: int, warmup: int) -> float:
    """Median wall time of ``fn`` in milliseconds, discarding ``warmup`` calls."""
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repetitions):
        start = time.perf_counter()
        fn()
        times.append((time.perf_counter() - start) * 1e3)
    return statistics.median(times)


def _check_close(name: str, got: np.ndarray, reference: np.ndarray, rtol: float = 1e-5) -> None:
    scale = max(float(np.abs(reference).max()), 1.0)
    err = float(np.abs(got.astype(np.float64) - reference).max())
    if err > rtol * scale:
        raise ConsistencyError(f"{name} product differs from the float64 reference by {err:.3g} (scale {scale:.3g})")


def _dense_kernel(case: BenchCase) -> Callable[[np.ndarray, np.ndarray], np.ndarray]:
    if case.kernel == 'blocked':
        return lambda a, b: gemm(a, b, threads=case.threads)
    return np.matmul


def run_case(case: BenchCase) -> BenchResult:
    """Check all three products against float64 references, then time them."""
    if case.repetitions < 10 or case.warmup < 3:
        raise ParameterError(f"need at least 10 repetitions and 3 warmup runs, got {case.repetitions} and {case.warmup}")
    rng = Rng(case.seed)
    rows, cols = case.weight_shape
    weights = rng_uniform(rng, -1.0, 1.0, (rows, cols))
    x = rng_uniform(rng, -1.0, 1.0, (cols, case.batch))
    sparse = sparsify_random(weights, case.sparsity, rng)
    csr = CsrMatrix.from_dense(sparse)
    shrink = structured_shrink(case)
    small_w = np.ascontiguousarray(weights[: shrink.rows, : shrink.cols])
    small_x = np.ascontiguousarray(x[: shrink.cols])
    dense = _dense_kernel(case)

    _check_close('dense', dense(weights, x), weights.astype(np.float64) @ x.astype(np.float64))
    _check_close('CSR', spmm_csr(csr, x, case.threads), sparse.astype(np.float64) @ x.astype(np.float64))
    _check_close('structured', dense(small_w, small_x), small_w.astype(np.float64) @ small_x.astype(np.float64))

    result = BenchResult(
        case=case,
        k=shrink.k,
        csr_fraction=1.0 - csr.nnz / weights.size if case.sparsity else 0.0,
        structured_fraction=shrink.fraction,
        structured_shape=(shrink.rows, shrink.cols),
        dense_ms=median_ms(lambda: dense(weights, x), case.repetitions, case.warmup),
        csr_ms=median_ms(lambda: spmm_csr(csr, x, case.threads), case.repetitions, case.warmup),
        structured_ms=median_ms(lambda: dense(small_w, small_x), case.repetitions, case.warmup),
    )
    logger.info(
        "%s: dense %.3f ms, CSR %.3f ms (%.2fx), structured k=%d %.3f ms (%.2fx)",
        case.case_id,
        result.dense_ms,
        result.csr_ms,
        result.csr_speedup,
        result.k,
        result.structured_ms,
        result.structured_speedup,
    )
    return result


def run_bench(cases: Sequence[BenchCase]) -> BenchReport:
    """Run every case in turn; one case is timed at a time."""
    return BenchReport([run_case(case) for case in cases])


def default_cases(
    full_shapes: bool = False,
    sparsities: Sequence[float] = (0.0, 0.5, 0.8, 0.9),
    repetitions: int = 10,
    warmup: int = 3,
    threads: int = 1,
    kernel: str = 'blas',
) -> List[BenchCase]:
    """Scaled-down LSTM shapes by default; ``full_shapes`` uses h = in = 1500, batch 10."""
    if full_shapes:
        shapes = [(1500, 10)]
    else:
        shapes = [(h, b) for h in (256, 512, 1024) for b in (10, 32)]
    return [
        BenchCase(h, h, b, s, repetitions=repetitions, warmup=warmup, threads=threads, kernel=kernel)
        for h, b in shapes
        for s in sparsities
    ]
