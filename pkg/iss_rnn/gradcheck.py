"""Central finite-difference checks of the analytic gradients."""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np

from iss_rnn.cells import (
    LstmLayerParams,
    RhnLayerParams,
    lstm_backward,
    lstm_sequence_forward,
    rhn_backward,
    rhn_sequence_forward,
)
from iss_rnn.errors import NumericError, ParameterError
from iss_rnn.models import LanguageModel
from iss_rnn.numerics import Rng, rng_uniform

logger = logging.getLogger(__name__)

Params = Dict[str, np.ndarray]
LossFn = Callable[[Params], Tuple[float, Params]]


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_tensor: str
    worst_index: Tuple[int, ...]
    checked: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def finite_difference_check(
    params: Params,
    loss_fn: LossFn,
    epsilon: float = 1e-5,
    tol: float = 1e-4,
    abs_floor: float = 1e-6,
    max_entries: Optional[int] = None,
    rng: Optional[Rng] = None,
) -> GradCheckReport:
    """Compare ``loss_fn``'s analytic gradient with (E(w+ε) − E(w−ε)) / 2ε.

    Every parameter is perturbed in a float64 copy. The relative error of an
    entry is |analytic − numeric| / max(|analytic|, |numeric|, abs_floor).

    Args:
        params: Named parameter arrays.
        loss_fn: Maps parameters to (loss, gradients with the same names).
        epsilon: Perturbation, in [1e-6, 1e-4].
        tol: Error bound used for ``passed``.
        abs_floor: Denominator floor for near-zero gradients.
        max_entries: Check at most this many random entries per tensor.
        rng: Picks the sampled entries; required with ``max_entries``.

    Raises:
        ParameterError: If ``epsilon`` is out of range.
        NumericError: If the loss is non-finite.
    """
    if not 1e-6 <= epsilon <= 1e-4:
        raise ParameterError(f"epsilon must be in [1e-6, 1e-4], got {epsilon}")
    work = {name: np.array(value, dtype=np.float64) for name, value in params.items()}

    def _loss(p: Params) -> float:
        value = float(loss_fn(p)[0])
        if not np.isfinite(value):
            raise NumericError(f"loss is {value}")
        return value

    base, grads = loss_fn(work)
    if not np.isfinite(base):
        raise NumericError(f"loss is {base}")

    worst, worst_name, worst_index, checked = 0.0, '', (), 0
    for name, tensor in work.items():
        indices = list(np.ndindex(tensor.shape))
        if max_entries is not None and len(indices) > max_entries:
            picker = rng if rng is not None else Rng(0)
            indices = [indices[i] for i in sorted(picker.generator.choice(len(indices), max_entries, replace=False))]
        analytic = np.asarray(grads[name], dtype=np.float64)
        for index in indices:
            original = tensor[index]
            tensor[index] = original + epsilon
            plus = _loss(work)
            tensor[index] = original - epsilon
            minus = _loss(work)
            tensor[index] = original
            numeric = (plus - minus) / (2.0 * epsilon)
            error = abs(analytic[index] - numeric) / max(abs(analytic[index]), abs(numeric), abs_floor)
            checked += 1
            if error > worst:
                worst, worst_name, worst_index = float(error), name, tuple(int(i) for i in index)
    report = GradCheckReport(worst, worst_name, worst_index, checked, tol)
    logger.info("Gradient check over %d entries: max relative error %.3g at %s%s", checked, worst, worst_name, worst_index)
    return report


def lstm_problem(
    seed: int,
    input_size: int,
    hidden_sizes: Sequence[int],
    steps: int,
    batch: int = 2,
    dropout_keep: float = 1.0,
) -> Tuple[Params, LossFn]:
    """A random LSTM stack with loss Σ_t ⟨h_top_t, P_t⟩ over float64 parameters and inputs."""
    rng = Rng(seed)
    params: Params = {'inputs': rng_uniform(rng, -1.0, 1.0, (steps, batch, input_size), np.float64)}
    sizes = [input_size] + list(hidden_sizes)
    for n, hidden in enumerate(hidden_sizes):
        params[f"layer_{n}/weight"] = rng_uniform(rng, -0.5, 0.5, (sizes[n] + hidden, 4 * hidden), np.float64)
        params[f"layer_{n}/bias"] = rng_uniform(rng, -0.5, 0.5, (4 * hidden,), np.float64)
    projection = rng_uniform(rng, -1.0, 1.0, (steps, batch, hidden_sizes[-1]), np.float64)
    masks = None
    if dropout_keep < 1.0:
        masks = [
            [rng.bernoulli(dropout_keep, (batch, sizes[n]), np.float64) for n in range(len(hidden_sizes))]
            for _ in range(steps)
        ]

    def loss_fn(p: Params) -> Tuple[float, Params]:
        layers = [
            LstmLayerParams(sizes[n], hidden, p[f"layer_{n}/weight"], p[f"layer_{n}/bias"])
            for n, hidden in enumerate(hidden_sizes)
        ]
        seq = lstm_sequence_forward(layers, list(p['inputs']), dropout_masks=masks)
        loss = float(sum((top * projection[t]).sum() for t, top in enumerate(seq.top)))
        back = lstm_backward(layers, seq.caches, list(projection))
        grads = {'inputs': np.stack(back.input_grads)}
        for n in range(len(layers)):
            grads[f"layer_{n}/weight"] = back.weight_grads[n]
            grads[f"layer_{n}/bias"] = back.bias_grads[n]
        return loss, grads

    return params, loss_fn


def rhn_problem(
    seed: int, width: int, depth: int, steps: int, embed_dim: Optional[int] = None, batch: int = 2, coupled_c: bool = False
) -> Tuple[Params, LossFn]:
    """A random RHN layer with loss Σ_t ⟨s_t, P_t⟩ over float64 parameters and inputs."""
    rng = Rng(seed)
    embed_dim = embed_dim or width
    gates = ('H', 'T') if coupled_c else ('H', 'T', 'C')
    params: Params = {'inputs': rng_uniform(rng, -1.0, 1.0, (steps, batch, embed_dim), np.float64)}
    for gate in gates:
        params[f"W_{gate}"] = rng_uniform(rng, -0.5, 0.5, (embed_dim, width), np.float64)
        for level in range(depth):
            params[f"R_{gate}_{level}"] = rng_uniform(rng, -0.5, 0.5, (width, width), np.float64)
            params[f"b_{gate}_{level}"] = rng_uniform(rng, -0.5, 0.5, (width,), np.float64)
    projection = rng_uniform(rng, -1.0, 1.0, (steps, batch, width), np.float64)

    def loss_fn(p: Params) -> Tuple[float, Params]:
        layer = RhnLayerParams(
            width=width,
            depth=depth,
            embed_dim=embed_dim,
            input_weights={g: p[f"W_{g}"] for g in gates},
            recurrent=[{g: p[f"R_{g}_{lv}"] for g in gates} for lv in range(depth)],
            biases=[{g: p[f"b_{g}_{lv}"] for g in gates} for lv in range(depth)],
            coupled_c=coupled_c,
        )
        outputs, caches, _ = rhn_sequence_forward(layer, list(p['inputs']))
        loss = float(sum((s * projection[t]).sum() for t, s in enumerate(outputs)))
        back = rhn_backward(layer, caches, list(projection))
        grads = {'inputs': np.stack(back.input_grads)}
        for gate in gates:
            grads[f"W_{gate}"] = back.input_weights[gate]
            for level in range(depth):
                grads[f"R_{gate}_{level}"] = back.recurrent[level][gate]
                grads[f"b_{gate}_{level}"] = back.biases[level][gate]
        return loss, grads

    return params, loss_fn


def model_problem(model: LanguageModel, inputs: np.ndarray, targets: np.ndarray) -> Tuple[Params, LossFn]:
    """Mean cross-entropy of a whole language model, in float64, without dropout."""
    model64 = model.astype(np.float64)

    def loss_fn(p: Params) -> Tuple[float, Params]:
        candidate = model64.with_tensors(p)
        loss, grads, _ = candidate.loss_and_grads(inputs, targets, candidate.init_state(inputs.shape[1]))
        return loss, grads

    return dict(model64.tensors), loss_fn
