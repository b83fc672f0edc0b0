"""Excise all-zero ISS components to get a smaller dense model."""

import json
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from iss_rnn.errors import ConsistencyError, DegenerateLayerError, FormatError
from iss_rnn.models import LanguageModel, model_from_tensors
from iss_rnn.numerics import Rng
from iss_rnn.topology import IssGroupMap, SparsityReport

logger = logging.getLogger(__name__)


@dataclass
class TensorPlan:
    """Kept rows/columns of a 2-D tensor, or kept entries of a 1-D one."""

    tensor_id: str
    shape: List[int]
    rows: List[int] = field(default_factory=list)
    cols: List[int] = field(default_factory=list)

    @property
    def new_shape(self) -> List[int]:
        if len(self.shape) == 1:
            return [len(self.rows)]
        return [len(self.rows), len(self.cols)]

    def apply(self, tensor: np.ndarray) -> np.ndarray:
        if len(self.shape) == 1:
            return np.ascontiguousarray(tensor[self.rows])
        return np.ascontiguousarray(tensor[np.ix_(self.rows, self.cols)])


@dataclass
class CompactionPlan:
    kind: str
    layer_names: List[str]
    original_sizes: List[int]
    kept: List[List[int]]
    tensors: Dict[str, TensorPlan]

    @property
    def hidden_sizes(self) -> List[int]:
        return [len(k) for k in self.kept]

    @property
    def dropped(self) -> List[List[int]]:
        return [sorted(set(range(size)) - set(kept)) for size, kept in zip(self.original_sizes, self.kept)]

    @property
    def is_identity(self) -> bool:
        return self.hidden_sizes == self.original_sizes

    def to_json(self) -> Dict:
        return {
            'kind': self.kind,
            'layers': [
                {'name': name, 'original_size': size, 'kept': kept}
                for name, size, kept in zip(self.layer_names, self.original_sizes, self.kept)
            ],
            'tensors': [
                {'tensor_id': p.tensor_id, 'shape': p.shape, 'rows': p.rows, 'cols': p.cols}
                for p in self.tensors.values()
            ],
        }

    @classmethod
    def from_json(cls, document: Mapping) -> 'CompactionPlan':
        try:
            layers = document['layers']
            tensors = {
                t['tensor_id']: TensorPlan(t['tensor_id'], list(t['shape']), list(t['rows']), list(t['cols']))
                for t in document['tensors']
            }
            return cls(
                document['kind'],
                [layer['name'] for layer in layers],
                [int(layer['original_size']) for layer in layers],
                [list(layer['kept']) for layer in layers],
                tensors,
            )
        except (KeyError, TypeError) as e:
            raise FormatError(f"malformed compaction plan: missing or invalid {e}")


def save_plan(plan: CompactionPlan, path: str) -> None:
    with open(path, 'w') as f:
        json.dump(plan.to_json(), f, indent=2)


def load_plan(path: str) -> CompactionPlan:
    with open(path) as f:
        return CompactionPlan.from_json(json.load(f))


def _kept(owners: Optional[np.ndarray], length: int, dropped: np.ndarray) -> List[int]:
    if owners is None:
        return list(range(length))
    padded = np.append(dropped, False)
    return np.flatnonzero(~padded[owners]).tolist()


def plan_compaction(
    weights: Mapping[str, np.ndarray], group_map: IssGroupMap, report: SparsityReport
) -> CompactionPlan:
    """Keep every component whose ISS group has a nonzero coordinate.

    Raises:
        ConsistencyError: If ``report`` was not produced from these weights and map.
        DegenerateLayerError: If every component of some layer is zero.
    """
    group_map.check_weights(weights)
    if len(report.layers) != group_map.N:
        raise ConsistencyError(f"report covers {len(report.layers)} layers, group map has {group_map.N}")
    dropped = group_map.group_nonzero_counts(weights, report.zero_tol) == 0
    kept_per_layer = []
    for n, layer in enumerate(report.layers):
        zero = np.flatnonzero(dropped[group_map.layer_slice(n)]).tolist()
        if layer.total != group_map.K(n) or zero != list(layer.zero_components):
            raise ConsistencyError(f"sparsity report for layer '{layer.name}' does not match the weights")
        kept = sorted(set(range(group_map.K(n))) - set(zero))
        if not kept:
            raise DegenerateLayerError(f"every component of layer '{group_map.layer_names[n]}' is zero")
        kept_per_layer.append(kept)

    tensors = {}
    for tensor_id in group_map.member_tensors:
        rows, cols = group_map.shapes[tensor_id]
        tensors[tensor_id] = TensorPlan(
            tensor_id,
            [rows, cols],
            _kept(group_map.row_owner.get(tensor_id), rows, dropped),
            _kept(group_map.col_owner.get(tensor_id), cols, dropped),
        )
    for tensor_id in group_map.bias_tensors:
        (length,) = group_map.shapes[tensor_id]
        tensors[tensor_id] = TensorPlan(tensor_id, [length], _kept(group_map.entry_owner[tensor_id], length, dropped))

    plan = CompactionPlan(
        group_map.kind,
        list(group_map.layer_names),
        [group_map.K(n) for n in range(group_map.N)],
        kept_per_layer,
        tensors,
    )
    if not plan.is_identity:
        logger.warning("Compaction drops %s components per layer", [len(d) for d in plan.dropped])
    return plan


def apply_compaction(model: LanguageModel, plan: CompactionPlan) -> LanguageModel:
    """Build the smaller dense model described by ``plan``.

    Raises:
        ConsistencyError: If the plan was made for a different model.
    """
    if plan.kind != model.kind:
        raise ConsistencyError(f"plan is for a '{plan.kind}' model, got '{model.kind}'")
    if plan.original_sizes != model.hidden_sizes():
        raise ConsistencyError(f"plan expects hidden sizes {plan.original_sizes}, model has {model.hidden_sizes()}")
    tensors = {}
    for name, tensor in model.tensors.items():
        piece = plan.tensors.get(name)
        if piece is None:
            tensors[name] = tensor.copy()
            continue
        if list(tensor.shape) != piece.shape:
            raise ConsistencyError(f"plan expects '{name}' with shape {piece.shape}, model has {list(tensor.shape)}")
        tensors[name] = piece.apply(tensor)
    missing = set(plan.tensors) - set(model.tensors)
    if missing:
        raise ConsistencyError(f"plan references tensors the model lacks: {sorted(missing)}")

    topology = model.topology()
    if model.kind == 'rhn':
        topology['width'] = plan.hidden_sizes[0]
    else:
        topology['hidden_sizes'] = plan.hidden_sizes
    compact = model_from_tensors(model.kind, topology, tensors, model.threads)
    compact.metadata = dict(model.metadata)
    logger.info(
        "Compacted %s model: hidden %s -> %s, parameters %d -> %d",
        model.kind,
        plan.original_sizes,
        plan.hidden_sizes,
        model.parameter_count(),
        compact.parameter_count(),
    )
    return compact


@dataclass
class EquivalenceReport:
    max_hidden_diff: float
    max_logit_diff: float
    tol: float
    probes: int

    @property
    def max_abs_diff(self) -> float:
        return max(self.max_hidden_diff, self.max_logit_diff)

    @property
    def passed(self) -> bool:
        return self.max_abs_diff <= self.tol


def random_probes(vocab_size: int, count: int, steps: int, batch: int, rng: Rng) -> List[np.ndarray]:
    return [rng.integers(vocab_size, size=steps * batch).reshape(steps, batch) for _ in range(count)]


def verify_equivalence(
    original: LanguageModel,
    compact: LanguageModel,
    plan: CompactionPlan,
    probes: Sequence[np.ndarray],
    tol: float = 0.0,
) -> EquivalenceReport:
    """Run both models on the same token sequences and compare.

    Hidden states are compared on the surviving components of every layer,
    logits in full.
    """
    hidden_diff, logit_diff = 0.0, 0.0
    for probe in probes:
        probe = np.asarray(probe)
        batch = probe.shape[1]
        full, _ = original.trace(probe, original.init_state(batch))
        small, _ = compact.trace(probe, compact.init_state(batch))
        for t in range(probe.shape[0]):
            for n, kept in enumerate(plan.kept):
                diff = np.abs(full.hidden[t][n][:, kept].astype(np.float64) - small.hidden[t][n])
                hidden_diff = max(hidden_diff, float(diff.max()))
            diff = np.abs(full.logits[t].astype(np.float64) - small.logits[t])
            logit_diff = max(logit_diff, float(diff.max()))
    report = EquivalenceReport(hidden_diff, logit_diff, tol, len(probes))
    logger.info("Equivalence over %d probes: max |diff| %.3g (tol %g)", len(probes), report.max_abs_diff, tol)
    return report
