"""Intrinsic Sparse Structure (ISS) weight groups.

Removing hidden component k of an LSTM removes one column from each gate
block of its combined weight, its recurrent row, and every row in other
layers that consumes h[k]. All those weights form the ISS weight group of
component k. For an RHN unit the group spans row and column k of every
transform at every depth, the input transforms and the embedding/output.

A group is stored as a tuple of ``Slice`` objects (whole rows or columns of
named tensors). Its coordinate set is the union of those slices. Within one
tensor a row or column is owned by at most one group, which lets the map
keep a per-tensor ``row_owner``/``col_owner`` index and evaluate all group
norms at once.
"""

import json
import logging
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from iss_rnn.errors import ShapeError, TopologyError

logger = logging.getLogger(__name__)

ROW, COL = 0, 1
SIZE_POLICIES = ('slices', 'unique')


@dataclass(frozen=True)
class WeightCoord:
    tensor_id: str
    row: int
    col: int


@dataclass(frozen=True)
class Slice:
    """A full row (axis 0) or column (axis 1) of a 2-D tensor."""

    tensor_id: str
    axis: int
    index: int


@dataclass(frozen=True)
class ReceiverSpec:
    """A tensor whose rows consume an owner layer's hidden state.

    Component k is read by row ``row_offset + k`` of ``tensor_id``. ``width``
    is the number of columns that row spans; it defaults to the full tensor.
    """

    tensor_id: str
    row_offset: int = 0
    width: Optional[int] = None

    def row(self, component: int) -> int:
        return self.row_offset + component


@dataclass(frozen=True)
class IssGroup:
    layer: int
    component: int
    slices: Tuple[Slice, ...]
    bias_entries: Tuple[Tuple[str, int], ...] = ()

    def rows_and_cols(self) -> Dict[str, Tuple[List[int], List[int]]]:
        """Per tensor, the row indices and column indices in this group."""
        members: Dict[str, Tuple[List[int], List[int]]] = {}
        for piece in self.slices:
            rows, cols = members.setdefault(piece.tensor_id, ([], []))
            (rows if piece.axis == ROW else cols).append(piece.index)
        return members


@dataclass(frozen=True)
class LstmLayerSpec:
    name: str
    input_size: int
    hidden_size: int
    receivers: Tuple[ReceiverSpec, ...] = ()

    @property
    def weight_id(self) -> str:
        return f"{self.name}/weight"

    @property
    def bias_id(self) -> str:
        return f"{self.name}/bias"


@dataclass(frozen=True)
class LstmTopology:
    """LSTM layers plus any non-LSTM receiver tensors (output or FC layers)."""

    layers: Tuple[LstmLayerSpec, ...]
    extra_tensors: Mapping[str, Tuple[int, ...]] = field(default_factory=dict)

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        shapes: Dict[str, Tuple[int, ...]] = {}
        for spec in self.layers:
            shapes[spec.weight_id] = (spec.input_size + spec.hidden_size, 4 * spec.hidden_size)
            shapes[spec.bias_id] = (4 * spec.hidden_size,)
        for name, shape in self.extra_tensors.items():
            shapes[name] = tuple(shape)
        return shapes


@dataclass(frozen=True)
class RhnTopology:
    width: int
    depth: int
    embed_dim: int
    vocab_size: int
    tied: bool = True
    coupled_c: bool = True

    @property
    def transforms(self) -> Tuple[str, ...]:
        return ('H', 'T') if self.coupled_c else ('H', 'T', 'C')

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        shapes: Dict[str, Tuple[int, ...]] = {'embedding': (self.vocab_size, self.embed_dim)}
        for gate in self.transforms:
            shapes[f"rhn/W_{gate}"] = (self.embed_dim, self.width)
            for level in range(self.depth):
                shapes[f"rhn/R_{gate}_{level}"] = (self.width, self.width)
                shapes[f"rhn/b_{gate}_{level}"] = (self.width,)
        if not self.tied:
            shapes['softmax/weight'] = (self.width, self.vocab_size)
        return shapes


def stacked_lstm_topology(
    input_size: int, hidden_sizes: Sequence[int], output_size: Optional[int] = None, prefix: str = 'lstm'
) -> LstmTopology:
    """A chain of LSTM layers, each feeding the next; the last feeds ``softmax/weight``."""
    layers = []
    for n, hidden in enumerate(hidden_sizes):
        in_size = input_size if n == 0 else hidden_sizes[n - 1]
        receivers: Tuple[ReceiverSpec, ...] = ()
        if n + 1 < len(hidden_sizes):
            receivers = (ReceiverSpec(f"{prefix}_{n + 1}/weight", 0, 4 * hidden_sizes[n + 1]),)
        elif output_size is not None:
            receivers = (ReceiverSpec('softmax/weight', 0, output_size),)
        layers.append(LstmLayerSpec(f"{prefix}_{n}", in_size, hidden, receivers))
    extra = {}
    if output_size is not None and hidden_sizes:
        extra['softmax/weight'] = (hidden_sizes[-1], output_size)
    return LstmTopology(tuple(layers), extra)


class IssGroupMap:
    """All ISS groups of a model, indexed by layer and component.

    Groups get a global index in layer-major order; per-tensor ownership
    arrays map each row/column/bias entry to that index (-1 when the entry
    belongs to no group).
    """

    def __init__(
        self,
        groups: Sequence[Sequence[IssGroup]],
        shapes: Mapping[str, Tuple[int, ...]],
        layer_names: Optional[Sequence[str]] = None,
        kind: str = 'lstm_stack',
    ):
        self.groups: List[List[IssGroup]] = [list(layer) for layer in groups]
        self.shapes: Dict[str, Tuple[int, ...]] = {k: tuple(v) for k, v in shapes.items()}
        self.layer_names = list(layer_names) if layer_names else [f"layer_{n}" for n in range(len(self.groups))]
        self.kind = kind
        self._offsets = np.cumsum([0] + [len(layer) for layer in self.groups])
        self.row_owner: Dict[str, np.ndarray] = {}
        self.col_owner: Dict[str, np.ndarray] = {}
        self.entry_owner: Dict[str, np.ndarray] = {}
        self._overlaps: Dict[str, Tuple[np.ndarray, np.ndarray, np.ndarray]] = {}
        self._slice_sizes = np.zeros(self.num_groups, dtype=np.int64)
        self._overlap_counts = np.zeros(self.num_groups, dtype=np.int64)
        self._index_groups()

    def _owner(self, table: Dict[str, np.ndarray], tensor_id: str, length: int) -> np.ndarray:
        if tensor_id not in table:
            table[tensor_id] = np.full(length, -1, dtype=np.int64)
        return table[tensor_id]

    def _shape2d(self, tensor_id: str) -> Tuple[int, int]:
        if tensor_id not in self.shapes:
            raise TopologyError(f"group references unknown tensor '{tensor_id}'")
        shape = self.shapes[tensor_id]
        if len(shape) != 2:
            raise TopologyError(f"tensor '{tensor_id}' must be 2-D to hold group rows/columns")
        return shape[0], shape[1]

    def _index_groups(self) -> None:
        overlaps: Dict[str, List[Tuple[int, int, int]]] = {}
        for gid, group in enumerate(self.all_groups()):
            for piece in group.slices:
                rows, cols = self._shape2d(piece.tensor_id)
                length = rows if piece.axis == ROW else cols
                table = self.row_owner if piece.axis == ROW else self.col_owner
                owners = self._owner(table, piece.tensor_id, length)
                if not 0 <= piece.index < length:
                    raise TopologyError(
                        f"layer {group.layer} component {group.component} indexes "
                        f"{'row' if piece.axis == ROW else 'column'} {piece.index} of '{piece.tensor_id}' "
                        f"which has only {length}"
                    )
                if owners[piece.index] != -1:
                    raise TopologyError(
                        f"{'row' if piece.axis == ROW else 'column'} {piece.index} of '{piece.tensor_id}' "
                        f"is claimed by two ISS groups"
                    )
                owners[piece.index] = gid
                self._slice_sizes[gid] += cols if piece.axis == ROW else rows
            for tensor_id, (rows, cols) in group.rows_and_cols().items():
                for r in rows:
                    for c in cols:
                        overlaps.setdefault(tensor_id, []).append((r, c, gid))
                self._overlap_counts[gid] += len(rows) * len(cols)
            for tensor_id, entry in group.bias_entries:
                if tensor_id not in self.shapes or len(self.shapes[tensor_id]) != 1:
                    raise TopologyError(f"bias tensor '{tensor_id}' is unknown or not 1-D")
                owners = self._owner(self.entry_owner, tensor_id, self.shapes[tensor_id][0])
                if owners[entry] != -1:
                    raise TopologyError(f"entry {entry} of '{tensor_id}' is claimed by two ISS groups")
                owners[entry] = gid
        for tensor_id, triples in overlaps.items():
            arr = np.asarray(triples, dtype=np.int64)
            self._overlaps[tensor_id] = (arr[:, 0], arr[:, 1], arr[:, 2])

    @property
    def N(self) -> int:
        return len(self.groups)

    def K(self, layer: int) -> int:
        return len(self.groups[layer])

    @property
    def num_groups(self) -> int:
        return int(self._offsets[-1])

    def all_groups(self) -> Iterable[IssGroup]:
        for layer in self.groups:
            yield from layer

    def global_index(self, layer: int, component: int) -> int:
        return int(self._offsets[layer]) + component

    def layer_of(self, gids: np.ndarray) -> np.ndarray:
        return np.searchsorted(self._offsets, gids, side='right') - 1

    def layer_slice(self, layer: int) -> slice:
        return slice(int(self._offsets[layer]), int(self._offsets[layer + 1]))

    @property
    def member_tensors(self) -> List[str]:
        return sorted(set(self.row_owner) | set(self.col_owner))

    @property
    def bias_tensors(self) -> List[str]:
        return sorted(self.entry_owner)

    def group_size(self, group: IssGroup, policy: str = 'slices') -> int:
        """Number of weights in a group.

        ``slices`` counts every member row and column in full, the way group
        sizes are usually quoted; ``unique`` counts each coordinate once.
        """
        gid = self.global_index(group.layer, group.component)
        if policy == 'slices':
            return int(self._slice_sizes[gid])
        if policy == 'unique':
            return int(self._slice_sizes[gid] - self._overlap_counts[gid])
        raise ValueError(f"Unknown size policy: {policy}")

    def coords(self, group: IssGroup) -> FrozenSet[WeightCoord]:
        """Enumerate the coordinate set of a group."""
        found = set()
        for piece in group.slices:
            rows, cols = self._shape2d(piece.tensor_id)
            if piece.axis == ROW:
                found.update(WeightCoord(piece.tensor_id, piece.index, c) for c in range(cols))
            else:
                found.update(WeightCoord(piece.tensor_id, r, piece.index) for r in range(rows))
        return frozenset(found)

    def check_weights(self, weights: Mapping[str, np.ndarray]) -> None:
        """Raise ShapeError unless every grouped tensor is present with its mapped shape."""
        for tensor_id in self.member_tensors + self.bias_tensors:
            if tensor_id not in weights:
                raise ShapeError(f"weights are missing grouped tensor '{tensor_id}'")
            if tuple(weights[tensor_id].shape) != self.shapes[tensor_id]:
                raise ShapeError(
                    f"tensor '{tensor_id}' has shape {weights[tensor_id].shape}, group map expects {self.shapes[tensor_id]}"
                )

    def member_mask(self, tensor_id: str) -> np.ndarray:
        """Boolean mask of the entries of ``tensor_id`` that belong to some group."""
        rows, cols = self._shape2d(tensor_id)
        row_in = self.row_owner.get(tensor_id, np.full(rows, -1)) >= 0
        col_in = self.col_owner.get(tensor_id, np.full(cols, -1)) >= 0
        return row_in[:, None] | col_in[None, :]

    def _reduce(self, tensor_id: str, values: np.ndarray) -> np.ndarray:
        """Sum ``values`` over each group's unique coordinates inside one tensor."""
        total = np.zeros(self.num_groups, dtype=np.float64)
        rows = self.row_owner.get(tensor_id)
        cols = self.col_owner.get(tensor_id)
        if rows is not None:
            keep = rows >= 0
            total += np.bincount(rows[keep], weights=values.sum(axis=1)[keep], minlength=self.num_groups)
        if cols is not None:
            keep = cols >= 0
            total += np.bincount(cols[keep], weights=values.sum(axis=0)[keep], minlength=self.num_groups)
        if tensor_id in self._overlaps:
            r, c, gid = self._overlaps[tensor_id]
            total -= np.bincount(gid, weights=values[r, c], minlength=self.num_groups)
        return total

    def group_sumsq(self, weights: Mapping[str, np.ndarray]) -> np.ndarray:
        """Σ w² over every group's coordinates, in float64, indexed by global group id."""
        total = np.zeros(self.num_groups, dtype=np.float64)
        for tensor_id in self.member_tensors:
            w = np.asarray(weights[tensor_id], dtype=np.float64)
            total += self._reduce(tensor_id, w * w)
        return np.maximum(total, 0.0)

    def group_nonzero_counts(self, weights: Mapping[str, np.ndarray], zero_tol: float = 0.0) -> np.ndarray:
        """Number of coordinates with |w| > zero_tol in every group."""
        total = np.zeros(self.num_groups, dtype=np.float64)
        for tensor_id in self.member_tensors:
            alive = (np.abs(np.asarray(weights[tensor_id])) > zero_tol).astype(np.float64)
            total += self._reduce(tensor_id, alive)
        return np.rint(total).astype(np.int64)

    def group_norms(self, weights: Mapping[str, np.ndarray], epsilon: float = 0.0) -> np.ndarray:
        return np.sqrt(epsilon + self.group_sumsq(weights))

    def scatter(self, tensor_id: str, per_group: np.ndarray) -> np.ndarray:
        """Broadcast one value per group onto every coordinate of ``tensor_id``.

        Coordinates in several groups receive the sum of their groups'
        values; entries outside all groups receive 0.
        """
        rows, cols = self._shape2d(tensor_id)
        padded = np.append(np.asarray(per_group, dtype=np.float64), 0.0)
        row_vals = padded[self.row_owner.get(tensor_id, np.full(rows, -1))]
        col_vals = padded[self.col_owner.get(tensor_id, np.full(cols, -1))]
        out = row_vals[:, None] + col_vals[None, :]
        if tensor_id in self._overlaps:
            r, c, gid = self._overlaps[tensor_id]
            np.subtract.at(out, (r, c), padded[gid])
        return out

    def to_json(self) -> Dict:
        """Describe every group as lists of rows and columns per tensor."""
        layers = []
        for n, layer in enumerate(self.groups):
            entries = []
            for group in layer:
                members = [
                    {'tensor_id': tensor_id, 'rows': sorted(rows), 'cols': sorted(cols)}
                    for tensor_id, (rows, cols) in sorted(group.rows_and_cols().items())
                ]
                bias: Dict[str, List[int]] = {}
                for tensor_id, entry in group.bias_entries:
                    bias.setdefault(tensor_id, []).append(entry)
                entries.append(
                    {
                        'component': group.component,
                        'size': self.group_size(group),
                        'unique_size': self.group_size(group, 'unique'),
                        'members': members,
                        'bias': [{'tensor_id': t, 'entries': e} for t, e in sorted(bias.items())],
                    }
                )
            layers.append({'layer': n, 'name': self.layer_names[n], 'groups': entries})
        return {
            'kind': self.kind,
            'shapes': {k: list(v) for k, v in self.shapes.items()},
            'layers': layers,
        }

    @classmethod
    def from_json(cls, document: Mapping) -> 'IssGroupMap':
        groups = []
        for layer in document['layers']:
            built = []
            for entry in layer['groups']:
                slices = []
                for member in entry['members']:
                    slices += [Slice(member['tensor_id'], ROW, r) for r in member['rows']]
                    slices += [Slice(member['tensor_id'], COL, c) for c in member['cols']]
                bias = tuple((b['tensor_id'], e) for b in entry.get('bias', []) for e in b['entries'])
                built.append(IssGroup(layer['layer'], entry['component'], tuple(slices), bias))
            groups.append(built)
        names = [layer.get('name') for layer in document['layers']]
        return cls(groups, {k: tuple(v) for k, v in document['shapes'].items()}, names, document.get('kind', 'lstm_stack'))


def export_group_map(group_map: IssGroupMap, path: str) -> None:
    with open(path, 'w') as f:
        json.dump(group_map.to_json(), f)


def load_group_map(path: str) -> IssGroupMap:
    with open(path) as f:
        return IssGroupMap.from_json(json.load(f))


def build_lstm_iss_groups(topology: LstmTopology) -> IssGroupMap:
    """Build the ISS group map of an LSTM topology.

    Group k of a layer holds the k-th column of each of its four gate blocks,
    its recurrent row ``input_size + k`` and row ``receiver.row(k)`` of every
    receiver. The four bias entries of component k ride along for compaction
    but are not group members.

    Raises:
        TopologyError: If a receiver references a tensor that does not exist,
            spans the wrong width or runs past the tensor's rows.
    """
    shapes = topology.shapes()
    groups = []
    for n, spec in enumerate(topology.layers):
        h, in_size = spec.hidden_size, spec.input_size
        if h < 1 or in_size < 1:
            raise TopologyError(f"layer '{spec.name}' has non-positive size")
        for receiver in spec.receivers:
            if receiver.tensor_id not in shapes:
                raise TopologyError(f"receiver of layer '{spec.name}' references unknown tensor '{receiver.tensor_id}'")
            target = shapes[receiver.tensor_id]
            if len(target) != 2:
                raise TopologyError(f"receiver tensor '{receiver.tensor_id}' is not 2-D")
            if receiver.width is not None and receiver.width != target[1]:
                raise TopologyError(
                    f"receiver '{receiver.tensor_id}' declares width {receiver.width}, tensor has {target[1]} columns"
                )
            if receiver.row_offset < 0 or receiver.row(h - 1) >= target[0]:
                raise TopologyError(
                    f"receiver rows {receiver.row_offset}..{receiver.row(h - 1)} fall outside '{receiver.tensor_id}' "
                    f"with {target[0]} rows"
                )
        layer_groups = []
        for k in range(h):
            slices = [Slice(spec.weight_id, COL, g * h + k) for g in range(4)]
            slices.append(Slice(spec.weight_id, ROW, in_size + k))
            slices += [Slice(r.tensor_id, ROW, r.row(k)) for r in spec.receivers]
            bias = tuple((spec.bias_id, g * h + k) for g in range(4))
            layer_groups.append(IssGroup(n, k, tuple(slices), bias))
        groups.append(layer_groups)
    group_map = IssGroupMap(groups, shapes, [spec.name for spec in topology.layers], 'lstm_stack')
    logger.debug("Built LSTM ISS groups for %d layers", group_map.N)
    return group_map


def build_rhn_iss_groups(topology: RhnTopology) -> IssGroupMap:
    """Build the ISS group map of one RHN layer with its embedding and output.

    Group k holds row k and column k of every recurrent transform at every
    depth, row k and column k of the depth-1 input transforms, column k of the
    embedding and, without weight tying, row k of the output weight.

    Raises:
        TopologyError: If sizes are non-positive or ``embed_dim != width``.
    """
    if topology.width < 1 or topology.depth < 1:
        raise TopologyError(f"RHN width and depth must be positive, got {topology.width}, {topology.depth}")
    if topology.embed_dim != topology.width:
        raise TopologyError(
            f"RHN ISS groups tie embedding dimension k to unit k; embed_dim {topology.embed_dim} != width {topology.width}"
        )
    layer_groups = []
    for k in range(topology.width):
        slices = []
        bias = []
        for gate in topology.transforms:
            for level in range(topology.depth):
                slices.append(Slice(f"rhn/R_{gate}_{level}", ROW, k))
                slices.append(Slice(f"rhn/R_{gate}_{level}", COL, k))
                bias.append((f"rhn/b_{gate}_{level}", k))
            slices.append(Slice(f"rhn/W_{gate}", ROW, k))
            slices.append(Slice(f"rhn/W_{gate}", COL, k))
        slices.append(Slice('embedding', COL, k))
        if not topology.tied:
            slices.append(Slice('softmax/weight', ROW, k))
        layer_groups.append(IssGroup(0, k, tuple(slices), tuple(bias)))
    return IssGroupMap([layer_groups], topology.shapes(), ['rhn'], 'rhn')


def group_norm(group: IssGroup, weights: Mapping[str, np.ndarray], epsilon: float = 0.0) -> float:
    """sqrt(ε + Σ w²) over the group's coordinate set."""
    if epsilon < 0:
        raise ValueError(f"epsilon must be non-negative, got {epsilon}")
    total = 0.0
    for tensor_id, (rows, cols) in group.rows_and_cols().items():
        w = np.asarray(weights[tensor_id], dtype=np.float64)
        rows_u, cols_u = sorted(set(rows)), sorted(set(cols))
        total += float((w[rows_u, :] ** 2).sum()) + float((w[:, cols_u] ** 2).sum())
        total -= float((w[np.ix_(rows_u, cols_u)] ** 2).sum())
    return float(np.sqrt(epsilon + max(total, 0.0)))


@dataclass
class LayerSparsity:
    name: str
    total: int
    zero: int
    zero_components: List[int]

    @property
    def surviving(self) -> int:
        return self.total - self.zero


@dataclass
class TensorCount:
    tensor_id: str
    before: int
    after: int
    zero_fraction: float


@dataclass
class SparsityReport:
    """Surviving components, parameter counts and group-norm histograms."""

    zero_tol: float
    layers: List[LayerSparsity]
    tensors: List[TensorCount]
    bin_edges: np.ndarray
    histogram: List[np.ndarray]

    @property
    def zero_groups_per_layer(self) -> List[int]:
        return [layer.zero for layer in self.layers]

    def layer_rows(self) -> List[Dict]:
        return [
            {
                'layer': layer.name,
                'total_components': layer.total,
                'zero_components': layer.zero,
                'surviving_components': layer.surviving,
            }
            for layer in self.layers
        ]

    def histogram_rows(self) -> List[Dict]:
        rows = []
        for layer, counts in zip(self.layers, self.histogram):
            for b, count in enumerate(counts):
                rows.append(
                    {
                        'layer': layer.name,
                        'bin_low': float(self.bin_edges[b]),
                        'bin_high': float(self.bin_edges[b + 1]),
                        'count': int(count),
                    }
                )
        return rows


def detect_zero_groups(
    weights: Mapping[str, np.ndarray], group_map: IssGroupMap, zero_tol: float = 0.0, bins: int = 20
) -> SparsityReport:
    """Find the groups whose every coordinate satisfies |w| <= zero_tol.

    Also counts parameters of every grouped tensor before and after removing
    the zero groups, and histograms the group norms (ε = 0) per layer on
    shared bin edges.
    """
    if zero_tol < 0:
        raise ValueError(f"zero_tol must be non-negative, got {zero_tol}")
    group_map.check_weights(weights)
    alive = group_map.group_nonzero_counts(weights, zero_tol)
    zero = alive == 0
    norms = group_map.group_norms(weights)

    layers = []
    for n in range(group_map.N):
        part = zero[group_map.layer_slice(n)]
        layers.append(LayerSparsity(group_map.layer_names[n], int(part.size), int(part.sum()), np.flatnonzero(part).tolist()))

    padded = np.append(zero, False)
    tensors = []
    for tensor_id in group_map.member_tensors + group_map.bias_tensors:
        shape = group_map.shapes[tensor_id]
        w = np.asarray(weights[tensor_id])
        if len(shape) == 1:
            after = int((~padded[group_map.entry_owner[tensor_id]]).sum())
        else:
            kept_rows = (~padded[group_map.row_owner.get(tensor_id, np.full(shape[0], -1))]).sum()
            kept_cols = (~padded[group_map.col_owner.get(tensor_id, np.full(shape[1], -1))]).sum()
            after = int(kept_rows * kept_cols)
        tensors.append(TensorCount(tensor_id, int(w.size), after, float(np.mean(w == 0))))

    top = float(norms.max()) if norms.size and norms.max() > 0 else 1.0
    edges = np.linspace(0.0, top, bins + 1)
    histogram = [np.histogram(norms[group_map.layer_slice(n)], bins=edges)[0] for n in range(group_map.N)]
    return SparsityReport(zero_tol, layers, tensors, edges, histogram)
