"""Versioned binary checkpoints.

Layout (all integers little-endian)::

    offset 0   4 bytes   magic b"SPCK"
    offset 4   uint32    format version (currently 1)
    offset 8   uint64    manifest length M in bytes
    offset 16  M bytes   UTF-8 JSON manifest
    16 + M     ...       payload: raw little-endian arrays, back to back

The manifest holds the network description, batch-norm hyperparameters,
free-form ``meta`` (JSON values), the payload CRC-32 and one entry per array (``name``, ``dtype``, ``shape``,
``offset`` relative to the payload start, ``nbytes``) in declaration order:
parameters, then batch-norm running statistics, then per-unit masks (uint8).
"""

import json
import struct
import zlib

import numpy as np

from .exceptions import FormatError
from .layers import BatchNormState, Network, NetworkSpec
from .tensor import Tensor

MAGIC = b"SPCK"
VERSION = 1
_HEADER = struct.Struct("<4sIQ")


def _arrays(model):
    out = [(name, t.data) for name, t in model.params.items()]
    for i, state in sorted(model.bn.items()):
        name = model.spec.layers[i].name
        out.append((f"{name}.running_mean", state.running_mean))
        out.append((f"{name}.running_var", state.running_var))
    for unit, mask in zip(model.units, model.masks):
        out.append((f"{unit.name}.mask", np.asarray(mask, dtype=np.uint8)))
    return out


def save_checkpoint(model, path, meta=None):
    entries, chunks, offset = [], [], 0
    for name, arr in _arrays(model):
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        entries.append({"name": name, "dtype": le.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    manifest = {
        "spec": model.spec.to_dict(),
        "dtype": model.dtype.str,
        "bn": {model.spec.layers[i].name: {"eps": s.eps, "momentum": s.momentum}
               for i, s in sorted(model.bn.items())},
        "meta": meta or {},
        "crc32": zlib.crc32(payload),
        "arrays": entries,
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, len(blob)))
        fh.write(blob)
        fh.write(payload)


def load_checkpoint(path, return_meta=False):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise FormatError("file shorter than the header", path, len(raw))
    magic, version, mlen = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", path, 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version} (expected {VERSION})", path, 4)
    start = _HEADER.size
    if len(raw) < start + mlen:
        raise FormatError("truncated manifest", path, len(raw))
    try:
        manifest = json.loads(raw[start:start + mlen].decode("utf-8"))
        entries = manifest["arrays"]
        manifest["spec"], manifest["crc32"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"unreadable manifest: {exc!r}", path, start) from None
    base = start + mlen
    payload = raw[base:]
    arrays = {}
    for entry in entries:
        lo, n = entry["offset"], entry["nbytes"]
        if lo + n > len(payload):
            raise FormatError(f"truncated array {entry['name']!r}", path, base + len(payload))
        arr = np.frombuffer(payload, dtype=np.dtype(entry["dtype"]), count=n // np.dtype(entry["dtype"]).itemsize,
                            offset=lo).reshape(entry["shape"])
        arrays[entry["name"]] = arr.astype(arr.dtype.newbyteorder("="))
    expected = base + sum(e["nbytes"] for e in manifest["arrays"])
    if len(raw) != expected:
        raise FormatError(f"{len(raw) - expected} trailing bytes", path, expected)
    if zlib.crc32(payload) != manifest["crc32"]:
        raise FormatError("payload checksum mismatch", path, base)

    spec = NetworkSpec.from_dict(manifest["spec"])
    dtype = np.dtype(manifest["dtype"])
    params = {}
    for i, layer in enumerate(spec.layers):
        for suffix in ("weight", "bias", "gamma", "beta"):
            key = f"{layer.name}.{suffix}"
            if key in arrays:
                params[key] = Tensor(arrays[key], requires_grad=True, dtype=arrays[key].dtype)
    bn = {}
    for i, layer in enumerate(spec.layers):
        if layer.kind == "batchnorm":
            hp = manifest["bn"][layer.name]
            bn[i] = BatchNormState(params[f"{layer.name}.gamma"], params[f"{layer.name}.beta"],
                                   arrays[f"{layer.name}.running_mean"].copy(),
                                   arrays[f"{layer.name}.running_var"].copy(),
                                   hp["eps"], hp["momentum"])
    masks = [arrays[f"{u.name}.mask"].astype(bool) for u in spec.prunable_units()]
    model = Network(spec, params, bn, masks, dtype=dtype)
    return (model, manifest.get("meta", {})) if return_meta else model
