"""Self-describing binary checkpoints.

Layout::

    b"KCPT" | u32 LE version | u64 LE header length | UTF-8 JSON header | payload

The header embeds the architecture spec and two directories (tensors as
little-endian f32, masks as u8) whose offsets are relative to the payload
start.  The payload carries a CRC32 so that corrupted bytes are reported
instead of silently loaded.
"""

import json
import math
import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np

from .errors import CheckpointError, UsageError
from .nncore.graph import ModelGraph
from .nncore.model import ModelState, check_state, parameter_shapes

MAGIC = b"KCPT"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


def _tensor_bytes(a):
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def save_checkpoint(graph, state, path, masks=None, meta=None):
    """Write ``graph``/``state``/``masks`` atomically; ``masks`` defaults to ``state.masks``."""
    check_state(graph, state)
    masks = state.masks if masks is None else masks
    conv = set(graph.conv_layers())
    tensors, mask_dir, chunks = [], [], []
    offset = 0
    for name, arr in state.tensors().items():
        blob = _tensor_bytes(arr)
        tensors.append({"name": name, "shape": list(arr.shape), "dtype": "f32", "offset": offset, "length": len(blob)})
        chunks.append(blob)
        offset += len(blob)
    for j in sorted(masks):
        if j not in conv:
            raise UsageError(f"mask for layer {j}, which is not a conv layer")
        m = np.asarray(masks[j], dtype=bool)
        l = graph.layers[j]
        if m.shape != (l.out_channels, l.in_channels):
            raise UsageError(f"mask for layer {j} has shape {m.shape}")
        blob = m.astype(np.uint8).tobytes()
        mask_dir.append({"name": f"layers.{j}", "layer": j, "shape": list(m.shape), "dtype": "u8",
                         "offset": offset, "length": len(blob)})
        chunks.append(blob)
        offset += len(blob)
    payload = b"".join(chunks)
    header = {
        "graph": graph.to_dict(),
        "tensors": tensors,
        "masks": mask_dir,
        "payload_length": len(payload),
        "payload_crc32": zlib.crc32(payload),
        "meta": meta or {},
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    data = _PREFIX.pack(MAGIC, FORMAT_VERSION, len(hbytes)) + hbytes + payload
    path = Path(path)
    try:
        fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot write checkpoint ({exc.strerror or exc})") from None
    return path


def _entry(e, kind, payload_len):
    if not isinstance(e, dict):
        raise CheckpointError("corrupt directory: entry is not an object")
    shape = e.get("shape")
    off, length = e.get("offset"), e.get("length")
    if not isinstance(e.get("name"), str):
        raise CheckpointError("corrupt directory: entry without a name")
    if not isinstance(shape, list) or not all(isinstance(s, int) and not isinstance(s, bool) and s >= 1 for s in shape):
        raise CheckpointError(f"corrupt directory: bad shape for {e['name']}")
    if not all(isinstance(v, int) and not isinstance(v, bool) and v >= 0 for v in (off, length)):
        raise CheckpointError(f"corrupt directory: bad offset/length for {e['name']}")
    dtype, width = ("f32", 4) if kind == "tensor" else ("u8", 1)
    if e.get("dtype") != dtype:
        raise CheckpointError(f"corrupt directory: {e['name']} has dtype {e.get('dtype')!r}, expected {dtype}")
    if length != width * math.prod(shape):
        raise CheckpointError(f"corrupt directory: {e['name']} byte length disagrees with shape {shape}")
    if off + length > payload_len:
        raise CheckpointError(f"corrupt directory: {e['name']} extends past the payload")
    return e["name"], tuple(shape), off, length


def _read(path):
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read ({exc.strerror or exc})") from None
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint")
    if len(raw) < _PREFIX.size:
        raise CheckpointError(f"{path}: corrupt header (truncated prefix)")
    _, version, hlen = _PREFIX.unpack_from(raw)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    start = _PREFIX.size + hlen
    if start > len(raw):
        raise CheckpointError(f"{path}: corrupt header (truncated)")
    try:
        header = json.loads(raw[_PREFIX.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError, RecursionError):
        raise CheckpointError(f"{path}: corrupt header (invalid JSON)") from None
    if not isinstance(header, dict):
        raise CheckpointError(f"{path}: corrupt header (not an object)")
    payload = raw[start:]
    plen = header.get("payload_length")
    if not isinstance(plen, int) or plen != len(payload):
        raise CheckpointError(f"{path}: corrupt payload (expected {plen} bytes, found {len(payload)})")
    if header.get("payload_crc32") != zlib.crc32(payload):
        raise CheckpointError(f"{path}: corrupt payload (checksum mismatch)")
    return header, payload


def load_checkpoint(path):
    """Return ``(graph, state, masks)``; every structural problem raises CheckpointError."""
    header, payload = _read(path)
    try:
        return _decode(header, payload)
    except CheckpointError:
        raise
    except UsageError as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    except (KeyError, TypeError, ValueError, AttributeError, OverflowError, RecursionError) as exc:
        raise CheckpointError(f"{path}: corrupt directory ({type(exc).__name__}: {exc})") from None


def _decode(header, payload):
    graph = ModelGraph.from_dict(header.get("graph"))
    tensors, masks_dir = header.get("tensors"), header.get("masks", [])
    if not isinstance(tensors, list) or not isinstance(masks_dir, list):
        raise CheckpointError("corrupt directory: directories must be lists")
    spans = []
    expected = parameter_shapes(graph)
    state = ModelState()
    for e in tensors:
        name, shape, off, length = _entry(e, "tensor", len(payload))
        spans.append((off, length))
        arr = np.frombuffer(payload, dtype="<f4", count=length // 4, offset=off).astype(np.float32).reshape(shape)
        if name.startswith("velocity."):
            base = name[len("velocity."):]
            if base not in expected or expected[base][0] != shape:
                raise CheckpointError(f"corrupt directory: stray momentum slot {name}")
            store, key = state.velocity, base
        elif name in expected:
            store, key = (state.params if expected[name][1] else state.buffers), name
        else:
            raise CheckpointError(f"corrupt directory: tensor {name} not in graph")
        if key in store:
            raise CheckpointError(f"corrupt directory: duplicate entry {name}")
        store[key] = arr
    try:
        check_state(graph, state)
    except UsageError as exc:
        raise CheckpointError(f"corrupt directory: {exc}") from None
    conv = graph.conv_layers()
    masks = {}
    for e in masks_dir:
        name, shape, off, length = _entry(e, "mask", len(payload))
        spans.append((off, length))
        j = e.get("layer")
        if j not in conv or j in masks:
            raise CheckpointError(f"corrupt directory: mask {name} does not name a distinct conv layer")
        l = graph.layers[j]
        if shape != (l.out_channels, l.in_channels):
            raise CheckpointError(f"corrupt directory: mask {name} has shape {shape}")
        raw = np.frombuffer(payload, dtype=np.uint8, count=length, offset=off)
        if raw.max(initial=0) > 1:
            raise CheckpointError(f"corrupt directory: mask {name} holds values other than 0/1")
        masks[j] = raw.astype(bool).reshape(shape)
    spans.sort()
    for (o1, l1), (o2, _) in zip(spans, spans[1:]):
        if o1 + l1 > o2:
            raise CheckpointError("corrupt directory: overlapping byte ranges")
    for j in conv:
        if j not in masks:
            l = graph.layers[j]
            masks[j] = np.ones((l.out_channels, l.in_channels), dtype=bool)
    state.masks = masks
    return graph, state, masks


def read_meta(path):
    header, _ = _read(path)
    meta = header.get("meta", {})
    return meta if isinstance(meta, dict) else {}
