"""Self-describing binary checkpoints for block weights and merged convolutions.

Layout (little-endian)::

    b"ERPF"                      magic
    u32 version                  currently 1
    u32 n + n bytes              UTF-8 JSON config record
    u32 tensor count
    per tensor:
        u16 n + n bytes          UTF-8 name
        u8 dtype                 0 = float32, 1 = float64
        u8 rank
        u32 * rank               dims
        raw data                 row-major

The config record carries ``"kind"``: ``"hprfb"`` for training-form weights
(plus the block configuration) or ``"merged"`` for a merged convolution.
"""

import json
import struct

import numpy as np

from .block import BranchParams, HPRFBConfig, HPRFBWeights
from .errors import CheckpointError
from .reparam import MergedConv
from .tensor import BNParams

__all__ = ["MAGIC", "VERSION", "write_checkpoint", "read_checkpoint", "encode", "decode"]

MAGIC = b"ERPF"
VERSION = 1
_DTYPES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_BN_FIELDS = ("mean", "var", "gamma", "beta")


def _branch_prefix(b):
    return f"{b.scale}.{b.rf_type.value}"


def _tensors_of(obj):
    if isinstance(obj, HPRFBWeights):
        record = {"kind": "hprfb", **obj.config.to_dict()}
        tensors = []
        for b in obj.branches:
            p = _branch_prefix(b)
            tensors.append((f"{p}.kernel", b.kernel))
            tensors.append((f"{p}.bias", b.bias))
            for f in _BN_FIELDS:
                tensors.append((f"{p}.bn_{f}", getattr(b.bn, f)))
        return record, tensors
    if isinstance(obj, MergedConv):
        record = {"kind": "merged", "stride": obj.stride, "groups": obj.groups}
        return record, [("kernel", obj.kernel), ("bias", obj.bias)]
    raise TypeError(f"cannot checkpoint {type(obj).__name__}")


def encode(obj):
    """Serialise :class:`HPRFBWeights` or :class:`MergedConv` to bytes."""
    record, tensors = _tensors_of(obj)
    if isinstance(obj, HPRFBWeights):
        for b in obj.branches:
            if b.bn.eps != obj.config.bn_eps:
                raise ValueError(f"branch {_branch_prefix(b)} BN eps {b.bn.eps} differs from config {obj.config.bn_eps}")
    text = json.dumps(record, sort_keys=True).encode("utf-8")
    out = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(text)), text, struct.pack("<I", len(tensors))]
    for name, arr in tensors:
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _DTYPES:
            raise ValueError(f"tensor {name!r}: unsupported precision {arr.dtype}")
        raw_name = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw_name)) + raw_name)
        out.append(struct.pack("<BB", _DTYPES[dt], arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, record):
        if self.pos + n > len(self.data):
            raise CheckpointError(
                f"truncated: needed {n} bytes, {len(self.data) - self.pos} left", record=record, offset=self.pos
            )
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, record):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), record))


def decode(data):
    """Inverse of :func:`encode`; validates every shape rule on load."""
    r = _Reader(data)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}, expected {MAGIC!r}", record="magic", offset=0)
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}", record="version", offset=4)
    (n,) = r.unpack("<I", "config")
    start = r.pos
    try:
        record = json.loads(r.take(n, "config").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable config record: {exc}", record="config", offset=start) from None
    (count,) = r.unpack("<I", "tensor count")
    tensors = {}
    for k in range(count):
        start = r.pos
        label = f"tensor #{k}"
        (name_len,) = r.unpack("<H", label)
        name = r.take(name_len, label).decode("utf-8", errors="replace")
        code, rank = r.unpack("<BB", name)
        if code not in _CODES:
            raise CheckpointError(f"unknown dtype code {code}", record=name, offset=start)
        dims = r.unpack(f"<{rank}I", name)
        dt = _CODES[code]
        size = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        raw = r.take(size, name)
        tensors[name] = np.frombuffer(raw, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes", record="end", offset=r.pos)
    try:
        return _build(record, tensors)
    except CheckpointError:
        raise
    except (KeyError, ValueError, TypeError) as exc:
        raise CheckpointError(f"invalid contents: {exc}", record=record.get("kind", "config")) from None


def _get(tensors, name):
    if name not in tensors:
        raise CheckpointError("missing tensor", record=name)
    return tensors[name]


def _build(record, tensors):
    kind = record.get("kind")
    if kind == "merged":
        return MergedConv(_get(tensors, "kernel"), _get(tensors, "bias"), int(record["stride"]), int(record["groups"]))
    if kind != "hprfb":
        raise CheckpointError(f"unknown checkpoint kind {kind!r}", record="config")
    config = HPRFBConfig.from_dict(record)
    branches = []
    for scale, t in config.branch_keys():
        p = f"{scale}.{t.value}"
        bn = BNParams(*(_get(tensors, f"{p}.bn_{f}") for f in _BN_FIELDS), eps=config.bn_eps)
        branches.append(BranchParams(scale, t, _get(tensors, f"{p}.kernel"), _get(tensors, f"{p}.bias"), bn))
    expected = 6 * len(branches)
    if len(tensors) != expected:
        raise CheckpointError(f"{len(tensors)} tensors present, config implies {expected}", record="tensor count")
    return HPRFBWeights(config, tuple(branches))


def write_checkpoint(path, obj, dtype=None):
    """Write weights or a merged conv; ``dtype`` optionally casts every tensor first."""
    if dtype is not None:
        obj = obj.astype(dtype)
    data = encode(obj)
    with open(path, "wb") as fh:
        fh.write(data)


def read_checkpoint(path):
    with open(path, "rb") as fh:
        return decode(fh.read())
