"""Model files: a JSON manifest followed by a raw tensor payload.

Layout::

    [4 bytes little-endian uint32 MANIFEST_LEN] [MANIFEST (UTF-8 JSON)] [PAYLOAD]

The manifest records the format version, model kind, topology, metadata and
for every tensor its name, shape, dtype and byte offset into the payload.
Tensors are stored little-endian, row-major, back to back.
"""

import json
import logging
import struct
from typing import Any, Dict, List

import numpy as np

from iss_rnn.errors import FormatError, IssRnnError
from iss_rnn.models import MODEL_KINDS, LanguageModel, model_from_tensors

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
_HEADER = struct.Struct('<I')
_DTYPES = {'f32': np.dtype('<f4'), 'f64': np.dtype('<f8')}
_DTYPE_NAMES = {np.dtype(np.float32): 'f32', np.dtype(np.float64): 'f64'}
_ENTRY_KEYS = ('name', 'shape', 'dtype', 'byte_offset')


def build_manifest(model: LanguageModel) -> Dict[str, Any]:
    entries: List[Dict[str, Any]] = []
    offset = 0
    for name, tensor in model.tensors.items():
        dtype = _DTYPE_NAMES.get(tensor.dtype)
        if dtype is None:
            raise FormatError(f"tensor '{name}' has unsupported dtype {tensor.dtype}")
        size = tensor.size * _DTYPES[dtype].itemsize
        entries.append({'name': name, 'shape': list(tensor.shape), 'dtype': dtype, 'byte_offset': offset})
        offset += size
    return {
        'format_version': FORMAT_VERSION,
        'kind': model.kind,
        'topology': model.topology(),
        'metadata': model.metadata,
        'tensors': entries,
    }


def save_model(model: LanguageModel, path: str) -> None:
    """Write ``model`` to ``path``."""
    manifest = build_manifest(model)
    encoded = json.dumps(manifest).encode('utf-8')
    with open(path, 'wb') as f:
        f.write(_HEADER.pack(len(encoded)))
        f.write(encoded)
        for entry in manifest['tensors']:
            tensor = model.tensors[entry['name']]
            f.write(np.ascontiguousarray(tensor, dtype=_DTYPES[entry['dtype']]).tobytes())
    logger.debug("Saved %s model with %d tensors to %s", model.kind, len(manifest['tensors']), path)


def read_manifest(blob: bytes) -> Dict[str, Any]:
    if len(blob) < _HEADER.size:
        raise FormatError("model file is too short to hold a manifest length")
    (length,) = _HEADER.unpack_from(blob)
    if _HEADER.size + length > len(blob):
        raise FormatError(f"manifest length {length} runs past the end of the file")
    try:
        manifest = json.loads(blob[_HEADER.size: _HEADER.size + length].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"manifest is not valid JSON: {str(e)}")
    if not isinstance(manifest, dict):
        raise FormatError("manifest must be a JSON object")
    return manifest


def _check_entry(i: int, entry: Any) -> None:
    if not isinstance(entry, dict):
        raise FormatError(f"tensor {i}: entry must be an object")
    for key in _ENTRY_KEYS:
        if key not in entry:
            raise FormatError(f"tensor {i}: missing '{key}'")
    name = entry['name']
    if not isinstance(name, str) or not name:
        raise FormatError(f"tensor {i}: name must be a non-empty string, got {name!r}")
    shape = entry['shape']
    if not isinstance(shape, list) or not all(isinstance(d, int) and d >= 0 for d in shape):
        raise FormatError(f"tensor '{name}' has invalid shape {shape!r}")
    if entry['dtype'] not in _DTYPES:
        raise FormatError(f"tensor '{name}' has unknown dtype {entry['dtype']!r}")
    offset = entry['byte_offset']
    if not isinstance(offset, int) or offset < 0:
        raise FormatError(f"tensor '{name}' has invalid byte_offset {offset!r}")


def _check_manifest(manifest: Dict[str, Any], payload_size: int) -> None:
    for key in ('format_version', 'kind', 'topology', 'tensors'):
        if key not in manifest:
            raise FormatError(f"manifest is missing '{key}'")
    if manifest['format_version'] != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {manifest['format_version']}, expected {FORMAT_VERSION}")
    if manifest['kind'] not in MODEL_KINDS:
        raise FormatError(f"unknown model kind {manifest['kind']!r}")
    if not isinstance(manifest['topology'], dict) or not isinstance(manifest['tensors'], list):
        raise FormatError("manifest 'topology' must be an object and 'tensors' a list")
    if manifest['kind'] == 'lstm_stack' and manifest['topology'].get('gate_order') != 'fiuo':
        raise FormatError(f"gate_order must be 'fiuo', got {manifest['topology'].get('gate_order')!r}")

    # Tensors are packed back to back: each starts exactly where the previous one ends.
    end, previous, seen = 0, None, set()
    for i, entry in enumerate(manifest['tensors']):
        _check_entry(i, entry)
        name, offset = entry['name'], entry['byte_offset']
        if name in seen:
            raise FormatError(f"tensor '{name}' appears twice in the manifest")
        seen.add(name)
        if offset < end:
            raise FormatError(f"tensor '{name}' at offset {offset} overlaps tensor '{previous}' ending at {end}")
        if offset > end:
            raise FormatError(f"tensor '{name}' at offset {offset} leaves a gap after byte {end}")
        size = int(np.prod(entry['shape'], dtype=np.int64)) * _DTYPES[entry['dtype']].itemsize
        if offset + size > payload_size:
            raise FormatError(
                f"payload truncated: tensor '{name}' needs bytes {offset}..{offset + size}, payload has {payload_size}"
            )
        end, previous = offset + size, name
    if end != payload_size:
        raise FormatError(f"payload holds {payload_size} bytes but tensors account for {end}")


def load_model(path: str, threads: int = 1) -> LanguageModel:
    """Read a model written by ``save_model``.

    Raises:
        FormatError: If the manifest is malformed, the version or kind is
            unknown, tensors overlap or leave gaps, or the payload is truncated.
    """
    with open(path, 'rb') as f:
        blob = f.read()
    manifest = read_manifest(blob)
    start = _HEADER.size + _HEADER.unpack_from(blob)[0]
    payload = memoryview(blob)[start:]
    _check_manifest(manifest, len(payload))

    tensors: Dict[str, np.ndarray] = {}
    for entry in manifest['tensors']:
        dtype = _DTYPES[entry['dtype']]
        count = int(np.prod(entry['shape'], dtype=np.int64))
        data = np.frombuffer(payload, dtype=dtype, count=count, offset=entry['byte_offset'])
        tensors[entry['name']] = data.reshape(entry['shape']).astype(dtype.newbyteorder('='))
    try:
        model = model_from_tensors(manifest['kind'], manifest['topology'], tensors, threads)
    except KeyError as e:
        raise FormatError(f"model file lacks tensor or topology field {e}")
    except IssRnnError as e:
        raise FormatError(f"model file is inconsistent: {str(e)}")
    model.metadata = dict(manifest.get('metadata') or {})
    return model
