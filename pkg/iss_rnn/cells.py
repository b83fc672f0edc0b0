"""LSTM and RHN recurrences with backpropagation through time.

All functions work on batches: vectors are rows, so ``x_t`` is [batch × input]
and states are [batch × hidden]. A 1-D vector is accepted wherever a batch is
and is treated as a batch of one.

The LSTM keeps the four gate blocks of its combined weight in the fixed order
forget, input, update, output ("fiuo"):

    [x_t, h_{t-1}] @ weight + bias = [f | i | u | o]
    c_t = f * c_{t-1} + i * u
    h_t = o * tanh(c_t)
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from iss_rnn.errors import ConsistencyError, ParameterError, ShapeError
from iss_rnn.numerics import gemm

GATE_ORDER = 'fiuo'


@dataclass
class LstmLayerParams:
    """Combined gate weight [(input+hidden) × 4·hidden] and bias [4·hidden]."""

    input_size: int
    hidden_size: int
    weight: np.ndarray
    bias: np.ndarray
    gate_order: str = GATE_ORDER

    def __post_init__(self):
        if self.input_size < 1 or self.hidden_size < 1:
            raise ShapeError(
                f"LSTM sizes must be positive, got input={self.input_size} hidden={self.hidden_size}"
            )
        if self.gate_order != GATE_ORDER:
            raise ParameterError(f"Unsupported gate order {self.gate_order!r}, expected {GATE_ORDER!r}")
        expected = (self.input_size + self.hidden_size, 4 * self.hidden_size)
        if self.weight.shape != expected:
            raise ShapeError(f"LSTM weight must be {expected}, got {self.weight.shape}")
        if self.bias.shape != (4 * self.hidden_size,):
            raise ShapeError(f"LSTM bias must be ({4 * self.hidden_size},), got {self.bias.shape}")

    def gate_slice(self, gate: str) -> slice:
        """Column range of one gate block."""
        index = self.gate_order.index(gate)
        return slice(index * self.hidden_size, (index + 1) * self.hidden_size)


@dataclass
class LstmState:
    h: np.ndarray
    c: np.ndarray

    @classmethod
    def zeros(cls, batch: int, hidden_size: int, dtype=np.float32) -> 'LstmState':
        return cls(np.zeros((batch, hidden_size), dtype=dtype), np.zeros((batch, hidden_size), dtype=dtype))


@dataclass
class StepCache:
    """Everything one LSTM step needs for its backward pass."""

    x: np.ndarray
    mask: Optional[np.ndarray]
    h_prev: np.ndarray
    c_prev: np.ndarray
    f: np.ndarray
    i: np.ndarray
    u: np.ndarray
    o: np.ndarray
    c: np.ndarray
    tanh_c: np.ndarray
    z: np.ndarray


@dataclass
class LstmSequenceOutput:
    """Result of an unrolled LSTM stack.

    ``outputs[t][n]`` is the hidden state of layer ``n`` at step ``t``,
    ``caches[n][t]`` the matching step cache.
    """

    outputs: List[List[np.ndarray]]
    caches: List[List[StepCache]]
    final_states: List[LstmState]

    @property
    def top(self) -> List[np.ndarray]:
        return [step[-1] for step in self.outputs]


@dataclass
class LstmGradients:
    weight_grads: List[np.ndarray]
    bias_grads: List[np.ndarray]
    input_grads: List[np.ndarray]
    initial_state_grads: List[LstmState]


def _rows(value: np.ndarray) -> np.ndarray:
    return np.atleast_2d(np.asarray(value))


def lstm_step(
    params: LstmLayerParams,
    x_t: np.ndarray,
    prev: LstmState,
    dropout_mask: Optional[np.ndarray] = None,
    threads: int = 1,
) -> Tuple[LstmState, StepCache]:
    """Advance one LSTM layer by one time step.

    Args:
        params: Layer parameters.
        x_t: Input [batch × input_size] or a single vector.
        prev: Previous hidden and cell state.
        dropout_mask: Optional inverted-dropout mask multiplied into ``x_t``.
        threads: Forwarded to gemm.

    Returns:
        Tuple[LstmState, StepCache]: New state (1-D if ``x_t`` was 1-D) and
        the step cache (always 2-D).

    Raises:
        ShapeError: If any operand size disagrees with ``params``.
    """
    vector = np.ndim(x_t) == 1
    x = _rows(x_t)
    h_prev, c_prev = _rows(prev.h), _rows(prev.c)
    batch = x.shape[0]
    hidden = params.hidden_size
    if x.shape[1] != params.input_size:
        raise ShapeError(f"x_t has {x.shape[1]} features, layer expects {params.input_size}")
    if h_prev.shape != (batch, hidden) or c_prev.shape != (batch, hidden):
        raise ShapeError(f"previous state must be {(batch, hidden)}, got h={h_prev.shape} c={c_prev.shape}")

    mask = None
    if dropout_mask is not None:
        mask = _rows(dropout_mask)
        if mask.shape != x.shape:
            raise ShapeError(f"dropout mask {mask.shape} does not match input {x.shape}")
        x = x * mask

    z = np.concatenate([x, h_prev], axis=1)
    pre = gemm(z, params.weight, threads=threads) + params.bias
    f = expit(pre[:, params.gate_slice('f')])
    i = expit(pre[:, params.gate_slice('i')])
    u = np.tanh(pre[:, params.gate_slice('u')])
    o = expit(pre[:, params.gate_slice('o')])
    c = f * c_prev + i * u
    tanh_c = np.tanh(c)
    h = o * tanh_c

    cache = StepCache(x=x, mask=mask, h_prev=h_prev, c_prev=c_prev, f=f, i=i, u=u, o=o, c=c, tanh_c=tanh_c, z=z)
    if vector:
        return LstmState(h[0], c[0]), cache
    return LstmState(h, c), cache


def check_chain(layers: Sequence[LstmLayerParams]) -> None:
    """Raise ShapeError unless each layer's hidden size feeds the next layer's input."""
    for n in range(len(layers) - 1):
        if layers[n].hidden_size != layers[n + 1].input_size:
            raise ShapeError(
                f"layer {n} hidden size {layers[n].hidden_size} does not match "
                f"layer {n + 1} input size {layers[n + 1].input_size}"
            )


def lstm_sequence_forward(
    layers: Sequence[LstmLayerParams],
    inputs: Sequence[np.ndarray],
    initial_states: Optional[Sequence[LstmState]] = None,
    dropout_masks: Optional[Sequence[Sequence[Optional[np.ndarray]]]] = None,
    threads: int = 1,
) -> LstmSequenceOutput:
    """Unroll a stack of LSTM layers over ``inputs``.

    ``dropout_masks[t][n]`` (if given) is applied to the input of layer ``n``
    at step ``t``. Initial states default to zeros.
    """
    check_chain(layers)
    if initial_states is None:
        if len(inputs) == 0:
            return LstmSequenceOutput([], [[] for _ in layers], [])
        batch = _rows(inputs[0]).shape[0]
        dtype = layers[0].weight.dtype
        initial_states = [LstmState.zeros(batch, layer.hidden_size, dtype) for layer in layers]
    if len(initial_states) != len(layers):
        raise ShapeError(f"{len(initial_states)} initial states for {len(layers)} layers")

    states = list(initial_states)
    outputs: List[List[np.ndarray]] = []
    caches: List[List[StepCache]] = [[] for _ in layers]
    for t, x_t in enumerate(inputs):
        below = x_t
        step_outputs = []
        for n, layer in enumerate(layers):
            mask = dropout_masks[t][n] if dropout_masks is not None else None
            states[n], cache = lstm_step(layer, below, states[n], mask, threads=threads)
            caches[n].append(cache)
            below = states[n].h
            step_outputs.append(below)
        outputs.append(step_outputs)
    return LstmSequenceOutput(outputs, caches, states)


def lstm_backward(
    layers: Sequence[LstmLayerParams],
    caches: Sequence[Sequence[StepCache]],
    output_grads: Sequence[np.ndarray],
    final_state_grads: Optional[Sequence[LstmState]] = None,
    threads: int = 1,
) -> LstmGradients:
    """Backpropagate through an unrolled LSTM stack.

    Args:
        layers: The parameters used in the forward pass.
        caches: ``caches[n][t]`` from lstm_sequence_forward.
        output_grads: dE/dh_t of the top layer for every step.
        final_state_grads: Optional gradients flowing into the final states.
        threads: Forwarded to gemm.

    Returns:
        LstmGradients: Weight and bias gradients per layer (accumulated over
        all steps), dE/dx_t for the bottom layer and gradients of the initial
        states.

    Raises:
        ConsistencyError: If the caches were not produced by these layers.
    """
    if len(caches) != len(layers):
        raise ConsistencyError(f"{len(caches)} cache lists for {len(layers)} layers")
    steps = len(output_grads)
    for n, layer in enumerate(layers):
        if len(caches[n]) != steps:
            raise ConsistencyError(f"layer {n} has {len(caches[n])} cached steps, expected {steps}")
        for cache in caches[n]:
            if cache.z.shape[1] != layer.input_size + layer.hidden_size or cache.f.shape[1] != layer.hidden_size:
                raise ConsistencyError(f"cache of layer {n} does not match its parameters")

    weight_grads = [np.zeros_like(layer.weight) for layer in layers]
    bias_grads = [np.zeros_like(layer.bias) for layer in layers]
    input_grads: List[np.ndarray] = [None] * steps  # type: ignore[list-item]

    if steps == 0:
        return LstmGradients(weight_grads, bias_grads, [], list(final_state_grads or []))

    batch = caches[0][0].z.shape[0]
    dtype = layers[0].weight.dtype
    dh_next = [np.zeros((batch, layer.hidden_size), dtype=dtype) for layer in layers]
    dc_next = [np.zeros((batch, layer.hidden_size), dtype=dtype) for layer in layers]
    if final_state_grads is not None:
        for n, grad in enumerate(final_state_grads):
            dh_next[n] = dh_next[n] + _rows(grad.h)
            dc_next[n] = dc_next[n] + _rows(grad.c)

    for t in reversed(range(steps)):
        from_above = _rows(output_grads[t])
        for n in reversed(range(len(layers))):
            layer, cache = layers[n], caches[n][t]
            dh = from_above + dh_next[n]
            do = dh * cache.tanh_c
            dc = dh * cache.o * (1.0 - cache.tanh_c ** 2) + dc_next[n]
            df = dc * cache.c_prev
            di = dc * cache.u
            du = dc * cache.i
            dc_next[n] = dc * cache.f

            dgates = np.concatenate(
                [
                    df * cache.f * (1.0 - cache.f),
                    di * cache.i * (1.0 - cache.i),
                    du * (1.0 - cache.u ** 2),
                    do * cache.o * (1.0 - cache.o),
                ],
                axis=1,
            )
            weight_grads[n] += gemm(cache.z.T, dgates, threads=threads)
            bias_grads[n] += dgates.sum(axis=0)
            dz = gemm(dgates, layer.weight.T, threads=threads)
            dx = dz[:, : layer.input_size]
            dh_next[n] = dz[:, layer.input_size:]
            if cache.mask is not None:
                dx = dx * cache.mask
            from_above = dx
        input_grads[t] = from_above

    initial = [LstmState(dh_next[n], dc_next[n]) for n in range(len(layers))]
    return LstmGradients(weight_grads, bias_grads, input_grads, initial)


@dataclass
class RhnLayerParams:
    """One Recurrent Highway Network layer of ``depth`` micro-steps.

    At depth l (0-based) with s_0 the previous state:

        h_l = tanh(x @ W_H [l == 0] + s_{l} @ R_H_l + b_H_l)
        t_l = sigmoid(x @ W_T [l == 0] + s_{l} @ R_T_l + b_T_l)
        c_l = sigmoid(x @ W_C [l == 0] + s_{l} @ R_C_l + b_C_l)   (1 - t_l when coupled)
        s_{l+1} = h_l * t_l + s_l * c_l
    """

    width: int
    depth: int
    embed_dim: int
    input_weights: Dict[str, np.ndarray]
    recurrent: List[Dict[str, np.ndarray]]
    biases: List[Dict[str, np.ndarray]]
    coupled_c: bool = False

    def __post_init__(self):
        if self.width < 1 or self.depth < 1 or self.embed_dim < 1:
            raise ShapeError(f"RHN sizes must be positive, got width={self.width} depth={self.depth}")
        if len(self.recurrent) != self.depth or len(self.biases) != self.depth:
            raise ShapeError(f"RHN of depth {self.depth} needs {self.depth} recurrent and bias sets")
        for gate in self.transforms:
            if self.input_weights[gate].shape != (self.embed_dim, self.width):
                raise ShapeError(f"W_{gate} must be {(self.embed_dim, self.width)}")
            for level in range(self.depth):
                if self.recurrent[level][gate].shape != (self.width, self.width):
                    raise ShapeError(f"R_{gate}_{level} must be {(self.width, self.width)}")
                if self.biases[level][gate].shape != (self.width,):
                    raise ShapeError(f"b_{gate}_{level} must be ({self.width},)")

    @property
    def transforms(self) -> Tuple[str, ...]:
        return ('H', 'T') if self.coupled_c else ('H', 'T', 'C')

    @classmethod
    def zeros(cls, width: int, depth: int, embed_dim: int, coupled_c: bool = False, dtype=np.float32) -> 'RhnLayerParams':
        gates = ('H', 'T') if coupled_c else ('H', 'T', 'C')
        return cls(
            width=width,
            depth=depth,
            embed_dim=embed_dim,
            input_weights={g: np.zeros((embed_dim, width), dtype=dtype) for g in gates},
            recurrent=[{g: np.zeros((width, width), dtype=dtype) for g in gates} for _ in range(depth)],
            biases=[{g: np.zeros(width, dtype=dtype) for g in gates} for _ in range(depth)],
            coupled_c=coupled_c,
        )


@dataclass
class RhnLevelCache:
    s_in: np.ndarray
    h: np.ndarray
    t: np.ndarray
    c: np.ndarray


@dataclass
class RhnStepCache:
    x: np.ndarray
    levels: List[RhnLevelCache] = field(default_factory=list)


@dataclass
class RhnGradients:
    input_weights: Dict[str, np.ndarray]
    recurrent: List[Dict[str, np.ndarray]]
    biases: List[Dict[str, np.ndarray]]
    input_grads: List[np.ndarray]
    initial_state_grad: Optional[np.ndarray]


def rhn_forward(
    params: RhnLayerParams, x: np.ndarray, s_prev: np.ndarray, threads: int = 1
) -> Tuple[np.ndarray, RhnStepCache]:
    """Run one RHN time step through all ``depth`` micro-steps.

    Raises:
        ShapeError: If ``x`` or ``s_prev`` does not match ``params``.
    """
    vector = np.ndim(s_prev) == 1
    x2, s = _rows(x), _rows(s_prev)
    if x2.shape[1] != params.embed_dim:
        raise ShapeError(f"RHN input has {x2.shape[1]} features, expected {params.embed_dim}")
    if s.shape != (x2.shape[0], params.width):
        raise ShapeError(f"RHN state must be {(x2.shape[0], params.width)}, got {s.shape}")

    cache = RhnStepCache(x=x2)
    for level in range(params.depth):
        pre = {}
        for gate in params.transforms:
            value = gemm(s, params.recurrent[level][gate], threads=threads) + params.biases[level][gate]
            if level == 0:
                value = gemm(x2, params.input_weights[gate], threads=threads) + value
            pre[gate] = value
        h = np.tanh(pre['H'])
        t = expit(pre['T'])
        c = 1.0 - t if params.coupled_c else expit(pre['C'])
        cache.levels.append(RhnLevelCache(s_in=s, h=h, t=t, c=c))
        s = h * t + s * c
    return (s[0] if vector else s), cache


def rhn_sequence_forward(
    params: RhnLayerParams,
    inputs: Sequence[np.ndarray],
    s0: Optional[np.ndarray] = None,
    threads: int = 1,
) -> Tuple[List[np.ndarray], List[RhnStepCache], Optional[np.ndarray]]:
    """Unroll an RHN layer; returns (states per step, caches, final state)."""
    if len(inputs) == 0:
        return [], [], s0
    s = s0
    if s is None:
        s = np.zeros((_rows(inputs[0]).shape[0], params.width), dtype=params.recurrent[0]['H'].dtype)
    outputs, caches = [], []
    for x_t in inputs:
        s, cache = rhn_forward(params, x_t, s, threads=threads)
        outputs.append(s)
        caches.append(cache)
    return outputs, caches, s


def rhn_backward(
    params: RhnLayerParams,
    caches: Sequence[RhnStepCache],
    output_grads: Sequence[np.ndarray],
    final_state_grad: Optional[np.ndarray] = None,
    threads: int = 1,
) -> RhnGradients:
    """Backpropagate through an unrolled RHN layer.

    Raises:
        ConsistencyError: If caches and gradients disagree with ``params``.
    """
    if len(caches) != len(output_grads):
        raise ConsistencyError(f"{len(caches)} caches for {len(output_grads)} output gradients")
    for cache in caches:
        if len(cache.levels) != params.depth or cache.levels[0].s_in.shape[1] != params.width:
            raise ConsistencyError("RHN cache does not match the layer parameters")

    gates = params.transforms
    grads_w = {g: np.zeros_like(params.input_weights[g]) for g in gates}
    grads_r = [{g: np.zeros_like(params.recurrent[lv][g]) for g in gates} for lv in range(params.depth)]
    grads_b = [{g: np.zeros_like(params.biases[lv][g]) for g in gates} for lv in range(params.depth)]
    input_grads: List[np.ndarray] = [None] * len(caches)  # type: ignore[list-item]

    ds_next = None if final_state_grad is None else _rows(final_state_grad)
    for step in reversed(range(len(caches))):
        cache = caches[step]
        ds = _rows(output_grads[step])
        if ds_next is not None:
            ds = ds + ds_next
        dx = np.zeros_like(cache.x)
        for level in reversed(range(params.depth)):
            lc = cache.levels[level]
            dh = ds * lc.t
            dt = ds * lc.h
            dc = ds * lc.s_in
            ds_in = ds * lc.c
            pre = {'H': dh * (1.0 - lc.h ** 2)}
            if params.coupled_c:
                pre['T'] = (dt - dc) * lc.t * (1.0 - lc.t)
            else:
                pre['T'] = dt * lc.t * (1.0 - lc.t)
                pre['C'] = dc * lc.c * (1.0 - lc.c)
            for gate in gates:
                grads_r[level][gate] += gemm(lc.s_in.T, pre[gate], threads=threads)
                grads_b[level][gate] += pre[gate].sum(axis=0)
                ds_in = ds_in + gemm(pre[gate], params.recurrent[level][gate].T, threads=threads)
                if level == 0:
                    grads_w[gate] += gemm(cache.x.T, pre[gate], threads=threads)
                    dx = dx + gemm(pre[gate], params.input_weights[gate].T, threads=threads)
            ds = ds_in
        input_grads[step] = dx
        ds_next = ds
    return RhnGradients(grads_w, grads_r, grads_b, input_grads, ds_next)
