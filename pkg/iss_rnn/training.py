"""Regularized SGD training of the language models.

One optimizer step is: forward/backward over an unrolled window, global-norm
gradient clipping, the regularized SGD update, then thresholding of the ISS
group members. Hidden states carry across windows within an epoch.
"""

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from iss_rnn.corpus import batchify, iterate_windows, unigram_perplexity
from iss_rnn.errors import DivergenceError, NumericError, ParameterError
from iss_rnn.models import LanguageModel
from iss_rnn.numerics import Rng
from iss_rnn.regularization import (
    clip_by_global_norm,
    group_lasso_penalty,
    sgd_step,
    sgd_step_group_lasso,
    sgd_step_l1,
    threshold_weights,
)
from iss_rnn.topology import IssGroupMap

logger = logging.getLogger(__name__)

REG_MODES = ('group_lasso', 'l1', 'none')
DEFAULT_TAU = {'lstm_stack': 1e-4, 'rhn': 4e-4}
THRESHOLD_ORDER = 'after_update'


@dataclass
class RegConfig:
    """Regularization settings.

    ``lam`` is the group Lasso coefficient, ``epsilon`` keeps the group norm
    differentiable at zero, ``tau`` is the per-step magnitude threshold.
    """

    mode: str = 'group_lasso'
    lam: float = 0.0
    epsilon: float = 1e-8
    tau: float = 1e-4
    l1_decay: float = 1e-4

    def __post_init__(self):
        if self.mode not in REG_MODES:
            raise ParameterError(f"regularization mode must be one of {REG_MODES}, got {self.mode!r}")
        if self.lam < 0:
            raise ParameterError(f"lambda must be non-negative, got {self.lam}")
        if self.tau < 0:
            raise ParameterError(f"tau must be non-negative, got {self.tau}")
        if self.l1_decay < 0:
            raise ParameterError(f"l1_decay must be non-negative, got {self.l1_decay}")
        if self.mode == 'group_lasso' and self.epsilon <= 0:
            raise ParameterError(f"epsilon must be positive for group Lasso, got {self.epsilon}")

    @classmethod
    def for_kind(cls, kind: str, **overrides) -> 'RegConfig':
        """Defaults with the threshold suited to the model kind."""
        overrides.setdefault('tau', DEFAULT_TAU.get(kind, 1e-4))
        return cls(**overrides)


@dataclass
class TrainConfig:
    learning_rate: float = 1.0
    lr_decay: float = 0.5
    warm_epochs: int = 4
    epochs: int = 10
    batch_size: int = 20
    unroll_steps: int = 35
    dropout_keep: float = 1.0
    seed: int = 0
    clip_norm: float = 5.0
    eval_batch_size: int = 10
    threads: int = 1

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ParameterError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0.0 < self.dropout_keep <= 1.0:
            raise ParameterError(f"dropout_keep must be in (0, 1], got {self.dropout_keep}")
        if self.unroll_steps < 1:
            raise ParameterError(f"unroll_steps must be at least 1, got {self.unroll_steps}")
        if self.epochs < 0 or self.batch_size < 1 or self.eval_batch_size < 1:
            raise ParameterError("epochs must be >= 0 and batch sizes >= 1")
        if self.threads < 1:
            raise ParameterError(f"threads must be at least 1, got {self.threads}")

    def lr_at(self, epoch: int) -> float:
        """Constant for ``warm_epochs`` epochs, then multiplied by ``lr_decay`` every epoch."""
        return self.learning_rate * self.lr_decay ** max(0, epoch - self.warm_epochs + 1)


@dataclass
class EpochMetrics:
    epoch: int
    learning_rate: float
    train_nll: float
    train_ppl: float
    valid_ppl: float
    penalty: float
    zeroed: int
    zero_groups: List[int]

    def row(self, layer_names: Sequence[str]) -> Dict:
        row = {k: v for k, v in asdict(self).items() if k != 'zero_groups'}
        for name, count in zip(layer_names, self.zero_groups):
            row[f"zero_groups_{name}"] = count
        row['zero_groups_total'] = sum(self.zero_groups)
        return row


@dataclass
class TrainMetrics:
    reg_mode: str
    layer_names: List[str]
    baseline_ppl: float
    threshold_order: str = THRESHOLD_ORDER
    epochs: List[EpochMetrics] = field(default_factory=list)

    @property
    def final(self) -> Optional[EpochMetrics]:
        return self.epochs[-1] if self.epochs else None

    def rows(self) -> List[Dict]:
        return [
            {**m.row(self.layer_names), 'reg_mode': self.reg_mode, 'threshold_order': self.threshold_order}
            for m in self.epochs
        ]


def zero_groups_per_layer(weights: Dict[str, np.ndarray], group_map: IssGroupMap) -> List[int]:
    zero = group_map.group_nonzero_counts(weights) == 0
    return [int(zero[group_map.layer_slice(n)].sum()) for n in range(group_map.N)]


def perplexity(model: LanguageModel, data: np.ndarray, batch_size: int = 1, unroll_steps: int = 35) -> float:
    """exp(mean token negative log-likelihood) of ``data`` under ``model``.

    Raises:
        ParameterError: If ``data`` holds fewer than two tokens.
    """
    data = np.asarray(data)
    if data.size < 2:
        raise ParameterError("perplexity needs at least two tokens of data")
    batch_size = max(1, min(batch_size, data.size // 2))
    batches = batchify(data, batch_size)
    state = model.init_state(batch_size)
    total, count = 0.0, 0
    for inputs, targets in iterate_windows(batches, unroll_steps):
        nll, n, state = model.evaluate(inputs, targets, state)
        total += nll
        count += n
    return float(math.exp(total / count))


def _regularized_step(
    weights: Dict[str, np.ndarray],
    grads: Dict[str, np.ndarray],
    group_map: IssGroupMap,
    eta: float,
    reg_cfg: RegConfig,
) -> Dict[str, np.ndarray]:
    if reg_cfg.mode == 'group_lasso':
        return sgd_step_group_lasso(weights, grads, group_map, eta, reg_cfg.lam, reg_cfg.epsilon)
    if reg_cfg.mode == 'l1':
        return sgd_step_l1(weights, grads, eta, reg_cfg.l1_decay, penalized=group_map.member_tensors)
    return sgd_step(weights, grads, eta)


def train_language_model(
    model: LanguageModel,
    corpus,
    train_cfg: TrainConfig,
    reg_cfg: RegConfig,
    group_map: Optional[IssGroupMap] = None,
    on_epoch: Optional[Callable[[EpochMetrics], None]] = None,
) -> Tuple[LanguageModel, TrainMetrics]:
    """Train ``model`` on ``corpus.train`` and validate on ``corpus.valid`` every epoch.

    Args:
        model: Starting model; training from an already trained model fine-tunes it.
        corpus: Any object with 1-D token arrays ``train`` and ``valid``.
        train_cfg: Optimizer and batching settings.
        reg_cfg: Regularizer and threshold settings.
        group_map: ISS groups to regularize; built from the model when omitted.
        on_epoch: Called with each epoch's metrics as soon as they exist.

    Returns:
        Tuple[LanguageModel, TrainMetrics]: The trained model and its metrics.

    Raises:
        DivergenceError: If the loss or a gradient becomes non-finite. The
            error carries the model from before the failing step.
    """
    group_map = group_map if group_map is not None else model.group_map()
    group_map.check_weights(model.tensors)
    model = model.copy()
    model.threads = train_cfg.threads
    train_batches = batchify(corpus.train, train_cfg.batch_size)
    mask_rng = Rng(train_cfg.seed, stream=1)

    baseline = unigram_perplexity(corpus.train, corpus.valid, model.vocab_size)
    metrics = TrainMetrics(reg_cfg.mode, list(group_map.layer_names), baseline)
    logger.info(
        "Training %s model (%d parameters), mode=%s lambda=%g tau=%g, unigram baseline ppl %.3f",
        model.kind,
        model.parameter_count(),
        reg_cfg.mode,
        reg_cfg.lam,
        reg_cfg.tau,
        baseline,
    )

    for epoch in range(train_cfg.epochs):
        started = time.perf_counter()
        eta = train_cfg.lr_at(epoch)
        state = model.init_state(train_cfg.batch_size)
        total_loss, tokens, zeroed = 0.0, 0, 0
        for step, (inputs, targets) in enumerate(iterate_windows(train_batches, train_cfg.unroll_steps)):
            masks = model.make_masks(mask_rng, train_cfg.dropout_keep, inputs.shape[0], train_cfg.batch_size)
            try:
                loss, grads, next_state = model.loss_and_grads(inputs, targets, state, masks)
                if not math.isfinite(loss):
                    raise NumericError(f"loss became {loss}")
                grads, grad_norm = clip_by_global_norm(grads, train_cfg.clip_norm)
                weights = _regularized_step(model.tensors, grads, group_map, eta, reg_cfg)
            except NumericError as e:
                raise DivergenceError(
                    f"Training diverged at epoch {epoch}, step {step}: {str(e)}", model=model, metrics=metrics
                ) from e
            weights, count = threshold_weights(weights, group_map, reg_cfg.tau)
            model = model.with_tensors(weights)
            state = next_state
            total_loss += loss * targets.size
            tokens += int(targets.size)
            zeroed += count
            logger.debug("epoch %d step %d loss %.4f grad norm %.4f", epoch, step, loss, grad_norm)

        train_nll = total_loss / max(tokens, 1)
        valid_ppl = perplexity(model, corpus.valid, train_cfg.eval_batch_size, train_cfg.unroll_steps)
        if not math.isfinite(valid_ppl):
            raise DivergenceError(f"Validation perplexity became {valid_ppl} at epoch {epoch}", model=model, metrics=metrics)
        epoch_metrics = EpochMetrics(
            epoch=epoch,
            learning_rate=eta,
            train_nll=train_nll,
            train_ppl=float(math.exp(train_nll)),
            valid_ppl=valid_ppl,
            penalty=group_lasso_penalty(model.tensors, group_map, reg_cfg.epsilon),
            zeroed=zeroed,
            zero_groups=zero_groups_per_layer(model.tensors, group_map),
        )
        metrics.epochs.append(epoch_metrics)
        logger.info(
            "Epoch %d: lr %.4g train ppl %.3f valid ppl %.3f penalty %.4f zero groups %s (%.1fs)",
            epoch,
            eta,
            epoch_metrics.train_ppl,
            valid_ppl,
            epoch_metrics.penalty,
            epoch_metrics.zero_groups,
            time.perf_counter() - started,
        )
        if on_epoch is not None:
            on_epoch(epoch_metrics)
    return model, metrics


@dataclass
class TauCalibration:
    tau: float
    warning: bool
    baseline_ppl: float
    perplexities: Dict[float, float]


def calibrate_tau(
    model: LanguageModel,
    valid: np.ndarray,
    tau_grid: Sequence[float],
    tolerance: float = 0.001,
    group_map: Optional[IssGroupMap] = None,
    batch_size: int = 10,
    unroll_steps: int = 35,
) -> TauCalibration:
    """Pick the largest τ whose thresholding keeps validation perplexity within ``tolerance``.

    A τ qualifies when the thresholded model's perplexity is at most
    ``baseline · (1 + tolerance)``. When none does, the smallest τ is returned
    with ``warning`` set.

    Raises:
        ParameterError: If the grid is empty, negative or not ascending.
    """
    grid = [float(t) for t in tau_grid]
    if not grid:
        raise ParameterError("tau grid must not be empty")
    if any(t < 0 for t in grid) or any(b <= a for a, b in zip(grid, grid[1:])):
        raise ParameterError(f"tau grid must be non-negative and strictly ascending, got {grid}")
    group_map = group_map if group_map is not None else model.group_map()
    baseline = perplexity(model, valid, batch_size, unroll_steps)
    limit = baseline * (1.0 + tolerance)

    perplexities: Dict[float, float] = {}
    chosen = None
    for tau in grid:
        weights, _ = threshold_weights(model.tensors, group_map, tau)
        ppl = perplexity(model.with_tensors(weights), valid, batch_size, unroll_steps)
        perplexities[tau] = ppl
        if ppl <= limit:
            chosen = tau
    if chosen is None:
        logger.warning("No tau in %s keeps perplexity within %g of %.4f; using %g", grid, tolerance, baseline, grid[0])
        return TauCalibration(grid[0], True, baseline, perplexities)
    logger.info("Calibrated tau=%g (baseline perplexity %.4f)", chosen, baseline)
    return TauCalibration(chosen, False, baseline, perplexities)
