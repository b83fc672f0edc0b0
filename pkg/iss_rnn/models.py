"""Character/word language models built from the LSTM and RHN cells.

A model is a named set of tensors plus the sizes that give them meaning.
Tensors live in ``model.tensors`` keyed by the names used throughout the
toolkit (group maps, model files, compaction plans):

    LSTM stack: embedding, lstm_{n}/weight, lstm_{n}/bias, softmax/weight, softmax/bias
    RHN:        embedding, rhn/W_{g}, rhn/R_{g}_{l}, rhn/b_{g}_{l}, softmax/weight, softmax/bias
"""

from dataclasses import dataclass
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from iss_rnn.cells import (
    LstmLayerParams,
    LstmState,
    RhnLayerParams,
    lstm_backward,
    lstm_sequence_forward,
    rhn_backward,
    rhn_sequence_forward,
)
from iss_rnn.errors import ConsistencyError, ShapeError
from iss_rnn.numerics import Rng, gemm, rng_uniform
from iss_rnn.topology import (
    IssGroupMap,
    RhnTopology,
    build_lstm_iss_groups,
    build_rhn_iss_groups,
    stacked_lstm_topology,
)

INIT_SCALE = 0.1


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _check_tokens(inputs: np.ndarray, targets: Optional[np.ndarray], vocab_size: int) -> None:
    if inputs.ndim != 2:
        raise ShapeError(f"token inputs must be [steps × batch], got shape {inputs.shape}")
    if targets is not None and targets.shape != inputs.shape:
        raise ShapeError(f"targets {targets.shape} do not match inputs {inputs.shape}")
    for array in (inputs, targets):
        if array is not None and array.size and (array.min() < 0 or array.max() >= vocab_size):
            raise ShapeError(f"token ids must lie in [0, {vocab_size})")


@dataclass
class Trace:
    """Per-step hidden states of every layer and the output logits."""

    hidden: List[List[np.ndarray]]
    logits: List[np.ndarray]


class LanguageModel:
    """Shared softmax/embedding plumbing; subclasses supply the recurrence."""

    kind = ''

    def __init__(self, tensors: Dict[str, np.ndarray], threads: int = 1):
        self.tensors = tensors
        self.threads = threads
        # Free-form extras stored alongside the tensors, e.g. the character vocabulary.
        self.metadata: Dict[str, Any] = {}

    @property
    def vocab_size(self) -> int:
        return int(self.tensors['embedding'].shape[0])

    @property
    def dtype(self):
        return self.tensors['embedding'].dtype

    def parameter_count(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def _derive(self, tensors: Dict[str, np.ndarray]) -> 'LanguageModel':
        model = self.from_tensors(self.topology(), tensors, self.threads)
        model.metadata = dict(self.metadata)
        return model

    def astype(self, dtype) -> 'LanguageModel':
        return self._derive({k: v.astype(dtype) for k, v in self.tensors.items()})

    def copy(self) -> 'LanguageModel':
        return self._derive({k: v.copy() for k, v in self.tensors.items()})

    def with_tensors(self, tensors: Mapping[str, np.ndarray]) -> 'LanguageModel':
        return self._derive(dict(tensors))

    def _output_weight(self) -> np.ndarray:
        return self.tensors['softmax/weight']

    def _logits(self, top: np.ndarray) -> np.ndarray:
        return gemm(top, self._output_weight(), threads=self.threads) + self.tensors['softmax/bias']

    def evaluate(self, inputs: np.ndarray, targets: np.ndarray, state: Any) -> Tuple[float, int, Any]:
        """Summed negative log-likelihood of ``targets`` without dropout.

        Returns:
            Tuple[float, int, Any]: NLL sum, token count and the carried state.
        """
        inputs, targets = np.asarray(inputs), np.asarray(targets)
        _check_tokens(inputs, targets, self.vocab_size)
        trace, state = self.trace(inputs, state)
        total = 0.0
        for t, logits in enumerate(trace.logits):
            logp = log_softmax(logits.astype(np.float64))
            total -= float(logp[np.arange(targets.shape[1]), targets[t]].sum())
        return total, int(targets.size), state

    def _softmax_backward(
        self, tops: Sequence[np.ndarray], targets: np.ndarray, grads: Dict[str, np.ndarray]
    ) -> Tuple[float, List[np.ndarray]]:
        """Mean cross-entropy over all tokens and dE/d(top) per step."""
        count = targets.size
        weight = self._output_weight()
        d_weight = np.zeros_like(weight)
        d_bias = np.zeros_like(self.tensors['softmax/bias'])
        loss = 0.0
        d_tops = []
        batch = np.arange(targets.shape[1])
        for t, top in enumerate(tops):
            logits = self._logits(top)
            logp = log_softmax(logits)
            loss -= float(logp[batch, targets[t]].astype(np.float64).sum())
            d_logits = np.exp(logp)
            d_logits[batch, targets[t]] -= 1.0
            d_logits /= count
            d_weight += gemm(top.T, d_logits, threads=self.threads)
            d_bias += d_logits.sum(axis=0)
            d_tops.append(gemm(d_logits, weight.T, threads=self.threads))
        grads['softmax/bias'] = d_bias
        self._add_output_weight_grad(grads, d_weight)
        return loss / count, d_tops

    def _add_output_weight_grad(self, grads: Dict[str, np.ndarray], d_weight: np.ndarray) -> None:
        grads['softmax/weight'] = d_weight

    def _embedding_grad(self, inputs: np.ndarray, input_grads: Sequence[np.ndarray]) -> np.ndarray:
        grad = np.zeros_like(self.tensors['embedding'])
        for t, dx in enumerate(input_grads):
            np.add.at(grad, inputs[t], dx)
        return grad

    # Subclass API
    def topology(self) -> Dict[str, Any]:
        raise NotImplementedError

    @classmethod
    def from_tensors(cls, topology: Mapping[str, Any], tensors: Dict[str, np.ndarray], threads: int = 1):
        raise NotImplementedError

    def hidden_sizes(self) -> List[int]:
        raise NotImplementedError

    def init_state(self, batch: int) -> Any:
        raise NotImplementedError

    def make_masks(self, rng: Rng, keep: float, steps: int, batch: int) -> Optional[List[List[np.ndarray]]]:
        raise NotImplementedError

    def trace(self, inputs: np.ndarray, state: Any) -> Tuple[Trace, Any]:
        raise NotImplementedError

    def loss_and_grads(
        self, inputs: np.ndarray, targets: np.ndarray, state: Any, masks: Optional[List[List[np.ndarray]]] = None
    ) -> Tuple[float, Dict[str, np.ndarray], Any]:
        raise NotImplementedError

    def group_map(self) -> IssGroupMap:
        raise NotImplementedError


class LstmLanguageModel(LanguageModel):
    """embedding → stacked LSTM → softmax."""

    kind = 'lstm_stack'

    def __init__(self, tensors: Dict[str, np.ndarray], hidden: Sequence[int], threads: int = 1):
        super().__init__(tensors, threads)
        self._hidden = list(hidden)
        self.embed_dim = int(tensors['embedding'].shape[1])
        self.layers = [self.layer(n) for n in range(len(self._hidden))]
        expected = (self._hidden[-1], self.vocab_size)
        if tensors['softmax/weight'].shape != expected or tensors['softmax/bias'].shape != (self.vocab_size,):
            raise ShapeError(f"softmax weight must be {expected} with bias ({self.vocab_size},)")

    @classmethod
    def create(
        cls, vocab_size: int, embed_dim: int, hidden_sizes: Sequence[int], rng: Rng, threads: int = 1, dtype=np.float32
    ) -> 'LstmLanguageModel':
        """Uniform [-0.1, 0.1) weights, zero biases."""
        tensors = {'embedding': rng_uniform(rng, -INIT_SCALE, INIT_SCALE, (vocab_size, embed_dim), dtype)}
        in_size = embed_dim
        for n, hidden in enumerate(hidden_sizes):
            tensors[f"lstm_{n}/weight"] = rng_uniform(rng, -INIT_SCALE, INIT_SCALE, (in_size + hidden, 4 * hidden), dtype)
            tensors[f"lstm_{n}/bias"] = np.zeros(4 * hidden, dtype=dtype)
            in_size = hidden
        tensors['softmax/weight'] = rng_uniform(rng, -INIT_SCALE, INIT_SCALE, (in_size, vocab_size), dtype)
        tensors['softmax/bias'] = np.zeros(vocab_size, dtype=dtype)
        return cls(tensors, hidden_sizes, threads)

    @classmethod
    def from_tensors(cls, topology: Mapping[str, Any], tensors: Dict[str, np.ndarray], threads: int = 1):
        if topology.get('gate_order', 'fiuo') != 'fiuo':
            raise ConsistencyError(f"unsupported gate order {topology['gate_order']!r}")
        return cls(tensors, topology['hidden_sizes'], threads)

    def topology(self) -> Dict[str, Any]:
        return {
            'vocab_size': self.vocab_size,
            'embed_dim': self.embed_dim,
            'hidden_sizes': list(self._hidden),
            'gate_order': 'fiuo',
        }

    def hidden_sizes(self) -> List[int]:
        return list(self._hidden)

    def layer(self, n: int) -> LstmLayerParams:
        in_size = self.embed_dim if n == 0 else self._hidden[n - 1]
        return LstmLayerParams(in_size, self._hidden[n], self.tensors[f"lstm_{n}/weight"], self.tensors[f"lstm_{n}/bias"])

    def iss_topology(self):
        return stacked_lstm_topology(self.embed_dim, self._hidden, self.vocab_size)

    def group_map(self) -> IssGroupMap:
        return build_lstm_iss_groups(self.iss_topology())

    def init_state(self, batch: int) -> List[LstmState]:
        return [LstmState.zeros(batch, h, self.dtype) for h in self._hidden]

    def make_masks(self, rng: Rng, keep: float, steps: int, batch: int) -> Optional[List[List[np.ndarray]]]:
        """One mask per step for each layer input and for the top output."""
        if keep >= 1.0:
            return None
        widths = [layer.input_size for layer in self.layers] + [self._hidden[-1]]
        return [[rng.bernoulli(keep, (batch, w), self.dtype) for w in widths] for _ in range(steps)]

    def _run(self, inputs: np.ndarray, state: List[LstmState], masks):
        xs = [self.tensors['embedding'][inputs[t]] for t in range(inputs.shape[0])]
        layer_masks = None if masks is None else [m[:-1] for m in masks]
        seq = lstm_sequence_forward(self.layers, xs, state, layer_masks, threads=self.threads)
        tops = seq.top
        if masks is not None:
            tops = [h * m[-1] for h, m in zip(tops, masks)]
        return seq, tops

    def trace(self, inputs: np.ndarray, state: List[LstmState]) -> Tuple[Trace, List[LstmState]]:
        inputs = np.asarray(inputs)
        _check_tokens(inputs, None, self.vocab_size)
        seq, tops = self._run(inputs, state, None)
        return Trace(seq.outputs, [self._logits(top) for top in tops]), seq.final_states

    def loss_and_grads(self, inputs, targets, state, masks=None):
        """Mean token cross-entropy and its gradient for every tensor."""
        inputs, targets = np.asarray(inputs), np.asarray(targets)
        _check_tokens(inputs, targets, self.vocab_size)
        seq, tops = self._run(inputs, state, masks)
        grads: Dict[str, np.ndarray] = {}
        loss, d_tops = self._softmax_backward(tops, targets, grads)
        if masks is not None:
            d_tops = [d * m[-1] for d, m in zip(d_tops, masks)]
        back = lstm_backward(self.layers, seq.caches, d_tops, threads=self.threads)
        for n in range(len(self.layers)):
            grads[f"lstm_{n}/weight"] = back.weight_grads[n]
            grads[f"lstm_{n}/bias"] = back.bias_grads[n]
        grads['embedding'] = self._embedding_grad(inputs, back.input_grads)
        return loss, grads, seq.final_states


class RhnLanguageModel(LanguageModel):
    """embedding → one RHN layer of ``depth`` micro-steps → softmax.

    With ``tied`` the output weight is the transposed embedding, which needs
    ``embed_dim == width``.
    """

    kind = 'rhn'

    def __init__(self, tensors: Dict[str, np.ndarray], width: int, depth: int, coupled_c: bool, tied: bool, threads: int = 1):
        super().__init__(tensors, threads)
        self.width, self.depth, self.coupled_c, self.tied = width, depth, coupled_c, tied
        self.embed_dim = int(tensors['embedding'].shape[1])
        if tied and self.embed_dim != width:
            raise ShapeError(f"weight tying needs embed_dim == width, got {self.embed_dim} and {width}")
        if not tied and tensors['softmax/weight'].shape != (width, self.vocab_size):
            raise ShapeError(f"softmax weight must be {(width, self.vocab_size)}")
        self.params = self._params()

    @staticmethod
    def gates(coupled_c: bool) -> Tuple[str, ...]:
        return ('H', 'T') if coupled_c else ('H', 'T', 'C')

    @classmethod
    def create(
        cls,
        vocab_size: int,
        embed_dim: int,
        width: int,
        depth: int,
        rng: Rng,
        coupled_c: bool = False,
        tied: bool = False,
        threads: int = 1,
        dtype=np.float32,
    ) -> 'RhnLanguageModel':
        def uniform(shape):
            return rng_uniform(rng, -INIT_SCALE, INIT_SCALE, shape, dtype)

        tensors = {'embedding': uniform((vocab_size, embed_dim))}
        for gate in cls.gates(coupled_c):
            tensors[f"rhn/W_{gate}"] = uniform((embed_dim, width))
            for level in range(depth):
                tensors[f"rhn/R_{gate}_{level}"] = uniform((width, width))
                tensors[f"rhn/b_{gate}_{level}"] = np.zeros(width, dtype=dtype)
        if not tied:
            tensors['softmax/weight'] = uniform((width, vocab_size))
        tensors['softmax/bias'] = np.zeros(vocab_size, dtype=dtype)
        return cls(tensors, width, depth, coupled_c, tied, threads)

    @classmethod
    def from_tensors(cls, topology: Mapping[str, Any], tensors: Dict[str, np.ndarray], threads: int = 1):
        return cls(tensors, topology['width'], topology['depth'], topology['coupled_c'], topology['tied'], threads)

    def topology(self) -> Dict[str, Any]:
        return {
            'vocab_size': self.vocab_size,
            'embed_dim': self.embed_dim,
            'width': self.width,
            'depth': self.depth,
            'coupled_c': self.coupled_c,
            'tied': self.tied,
        }

    def hidden_sizes(self) -> List[int]:
        return [self.width]

    def _params(self) -> RhnLayerParams:
        gates = self.gates(self.coupled_c)
        return RhnLayerParams(
            width=self.width,
            depth=self.depth,
            embed_dim=self.embed_dim,
            input_weights={g: self.tensors[f"rhn/W_{g}"] for g in gates},
            recurrent=[{g: self.tensors[f"rhn/R_{g}_{lv}"] for g in gates} for lv in range(self.depth)],
            biases=[{g: self.tensors[f"rhn/b_{g}_{lv}"] for g in gates} for lv in range(self.depth)],
            coupled_c=self.coupled_c,
        )

    def iss_topology(self) -> RhnTopology:
        return RhnTopology(self.width, self.depth, self.embed_dim, self.vocab_size, self.tied, self.coupled_c)

    def group_map(self) -> IssGroupMap:
        return build_rhn_iss_groups(self.iss_topology())

    def _output_weight(self) -> np.ndarray:
        return self.tensors['embedding'].T if self.tied else self.tensors['softmax/weight']

    def _add_output_weight_grad(self, grads, d_weight):
        if self.tied:
            grads['embedding_out'] = d_weight.T
        else:
            grads['softmax/weight'] = d_weight

    def init_state(self, batch: int) -> np.ndarray:
        return np.zeros((batch, self.width), dtype=self.dtype)

    def make_masks(self, rng: Rng, keep: float, steps: int, batch: int) -> Optional[List[List[np.ndarray]]]:
        if keep >= 1.0:
            return None
        return [
            [rng.bernoulli(keep, (batch, self.embed_dim), self.dtype), rng.bernoulli(keep, (batch, self.width), self.dtype)]
            for _ in range(steps)
        ]

    def _run(self, inputs, state, masks):
        xs = [self.tensors['embedding'][inputs[t]] for t in range(inputs.shape[0])]
        if masks is not None:
            xs = [x * m[0] for x, m in zip(xs, masks)]
        outputs, caches, final = rhn_sequence_forward(self.params, xs, state, threads=self.threads)
        tops = outputs if masks is None else [s * m[1] for s, m in zip(outputs, masks)]
        return outputs, caches, final, tops

    def trace(self, inputs, state):
        inputs = np.asarray(inputs)
        _check_tokens(inputs, None, self.vocab_size)
        outputs, _, final, tops = self._run(inputs, state, None)
        return Trace([[s] for s in outputs], [self._logits(top) for top in tops]), final

    def loss_and_grads(self, inputs, targets, state, masks=None):
        inputs, targets = np.asarray(inputs), np.asarray(targets)
        _check_tokens(inputs, targets, self.vocab_size)
        _, caches, final, tops = self._run(inputs, state, masks)
        grads: Dict[str, np.ndarray] = {}
        loss, d_tops = self._softmax_backward(tops, targets, grads)
        if masks is not None:
            d_tops = [d * m[1] for d, m in zip(d_tops, masks)]
        back = rhn_backward(self.params, caches, d_tops, threads=self.threads)
        for gate in self.gates(self.coupled_c):
            grads[f"rhn/W_{gate}"] = back.input_weights[gate]
            for level in range(self.depth):
                grads[f"rhn/R_{gate}_{level}"] = back.recurrent[level][gate]
                grads[f"rhn/b_{gate}_{level}"] = back.biases[level][gate]
        input_grads = back.input_grads
        if masks is not None:
            input_grads = [dx * m[0] for dx, m in zip(input_grads, masks)]
        grads['embedding'] = self._embedding_grad(inputs, input_grads) + grads.pop('embedding_out', 0.0)
        return loss, grads, final


MODEL_KINDS = {
    LstmLanguageModel.kind: LstmLanguageModel,
    RhnLanguageModel.kind: RhnLanguageModel,
}


def model_from_tensors(kind: str, topology: Mapping[str, Any], tensors: Dict[str, np.ndarray], threads: int = 1) -> LanguageModel:
    if kind not in MODEL_KINDS:
        raise ConsistencyError(f"unknown model kind {kind!r}")
    return MODEL_KINDS[kind].from_tensors(topology, tensors, threads)
