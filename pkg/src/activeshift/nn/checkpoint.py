"""Binary checkpoints.

Layout::

    b"ASLCKPT1"
    uint64 LE   manifest length in bytes
    manifest    UTF-8 JSON: {"meta": {...}, "entries": [{"name", "shape", "dtype"}, ...]}
    data        raw little-endian arrays, concatenated in manifest order

Entry names are prefixed ``param/``, ``velocity/`` or ``buffer/``.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from ..errors import FormatError, ShapeError
from .layers import walk

MAGIC = b"ASLCKPT1"


def write_checkpoint(path, arrays: dict, meta=None):
    entries, blobs = [], []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        entries.append({"name": name, "shape": list(arr.shape), "dtype": le.dtype.str})
        blobs.append(np.ascontiguousarray(le).tobytes())
    manifest = json.dumps({"meta": meta or {}, "entries": entries}).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for blob in blobs:
            fh.write(blob)


def read_checkpoint(path):
    """Return ``(arrays, meta)``."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != MAGIC:
        raise FormatError("not a checkpoint file: bad magic", offset=0)
    if len(raw) < 16:
        raise FormatError("truncated checkpoint header", offset=len(raw))
    (mlen,) = struct.unpack_from("<Q", raw, 8)
    pos = 16 + mlen
    if pos > len(raw):
        raise FormatError("truncated checkpoint manifest", offset=len(raw))
    manifest = json.loads(raw[16:pos].decode())
    arrays = {}
    for entry in manifest["entries"]:
        dt = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"], dtype=np.int64))
        nbytes = count * dt.itemsize
        if pos + nbytes > len(raw):
            raise FormatError(f"truncated data for {entry['name']}", offset=pos)
        arr = np.frombuffer(raw, dtype=dt, count=count, offset=pos).reshape(entry["shape"])
        arrays[entry["name"]] = arr.astype(dt.newbyteorder("="))
        pos += nbytes
    return arrays, manifest["meta"]


def save(path, network, optimizer=None, meta=None):
    arrays = {}
    for name, p in network.named_parameters():
        arrays[f"param/{name}"] = p.data
    if optimizer is not None:
        for name, v in optimizer.velocity.items():
            arrays[f"velocity/{name}"] = v
    for name, buf in network.named_buffers():
        arrays[f"buffer/{name}"] = buf
    write_checkpoint(path, arrays, meta)


def load(path, network, optimizer=None):
    """Restore ``network`` (and ``optimizer`` velocities) in place; returns the meta dict.

    Raises :class:`ShapeError` when the checkpoint does not fit the network.
    """
    arrays, meta = read_checkpoint(path)
    params = dict(network.named_parameters())
    wanted = {f"param/{n}" for n in params}
    missing = wanted - arrays.keys()
    if missing:
        raise ShapeError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
    for name, p in params.items():
        arr = arrays[f"param/{name}"]
        if arr.shape != p.data.shape:
            raise ShapeError(f"checkpoint shape {arr.shape} for {name} does not match network {p.data.shape}")
    for name, p in params.items():
        p.data = arrays[f"param/{name}"].astype(p.data.dtype)
    if optimizer is not None:
        for name in optimizer.velocity:
            key = f"velocity/{name}"
            if key in arrays:
                optimizer.velocity[name] = arrays[key].astype(optimizer.velocity[name].dtype)
    for qname, layer in _buffer_layers(network):
        bufs = {}
        for key in layer.buffers():
            full = f"buffer/{qname}.{key}"
            if full not in arrays:
                raise ShapeError(f"checkpoint lacks buffer {qname}.{key}")
            bufs[key] = arrays[full]
        layer.load_buffers(bufs)
    return meta


def _buffer_layers(network):
    return [(q, layer) for q, layer in walk(network.body) if layer.buffers()]
