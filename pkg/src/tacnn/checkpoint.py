"""Binary checkpoint format.

Layout (little-endian)::

    b"TACN"  u16 version
    u32 length, canonical JSON {"config": ..., "step": ..., "flatten": "channel-major"}
    u32 entry count
    per entry: u16 name length, UTF-8 name, 4 x u32 extents, f32 data (row-major)

Entries are the model's named parameters in registration order followed by
its buffers (batch-norm running statistics, stored as ``(C, 1, 1, 1)``).
"""

from __future__ import annotations

import io
import json
import struct

import numpy as np

from .errors import FormatError
from .model import ModelConfig, TaCNN

MAGIC = b"TACN"
VERSION = 1


def _entries(model):
    for name, p in model.named_parameters():
        yield name, p.data
    for name, b in model.named_buffers():
        yield name, b.reshape(-1, 1, 1, 1)


def dumps(model, step=0):
    meta = json.dumps({"config": model.config.to_dict(), "step": int(step), "flatten": "channel-major"},
                      sort_keys=True, separators=(",", ":")).encode("utf-8")
    entries = list(_entries(model))
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<H", VERSION))
    buf.write(struct.pack("<I", len(meta)))
    buf.write(meta)
    buf.write(struct.pack("<I", len(entries)))
    for name, arr in entries:
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<4I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def loads(blob):
    """Rebuild a float32 model; returns ``(model, step)``."""
    view = memoryview(blob)
    pos = 0

    def read(n):
        nonlocal pos
        if pos + n > len(view):
            raise FormatError("checkpoint truncated")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(read(4)) != MAGIC:
        raise FormatError("bad checkpoint magic")
    (version,) = struct.unpack("<H", read(2))
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    (meta_len,) = struct.unpack("<I", read(4))
    try:
        meta = json.loads(bytes(read(meta_len)).decode("utf-8"))
        config = ModelConfig.from_dict(meta["config"])
    except (ValueError, KeyError, TypeError) as e:
        raise FormatError(f"bad checkpoint header: {e}") from None
    model = TaCNN(config)
    params = dict(model.named_parameters())
    buffers = {}
    for m_name, m in _named_modules(model):
        for b in m._buffers:
            buffers[f"{m_name}{b}"] = (m, b)

    (count,) = struct.unpack("<I", read(4))
    seen = set()
    for _ in range(count):
        (n,) = struct.unpack("<H", read(2))
        name = bytes(read(n)).decode("utf-8")
        dims = struct.unpack("<4I", read(16))
        size = int(np.prod(dims))
        arr = np.frombuffer(read(4 * size), dtype="<f4").astype(np.float32).reshape(dims)
        if name in params:
            if params[name].dims != dims:
                raise FormatError(f"{name}: stored {dims}, model expects {params[name].dims}")
            params[name].data = arr
        elif name in buffers:
            mod, attr = buffers[name]
            current = getattr(mod, attr)
            if current.size != size:
                raise FormatError(f"{name}: stored {size} values, model expects {current.size}")
            current[...] = arr.reshape(current.shape)
        else:
            raise FormatError(f"unknown checkpoint entry {name!r}")
        seen.add(name)
    missing = (set(params) | set(buffers)) - seen
    if missing:
        raise FormatError(f"checkpoint lacks {sorted(missing)[:3]}")
    if pos != len(view):
        raise FormatError("trailing bytes after checkpoint")
    return model, int(meta.get("step", 0))


def _named_modules(module, prefix=""):
    yield prefix, module
    for name, child in module._children.items():
        yield from _named_modules(child, f"{prefix}{name}.")


def save_checkpoint(path, model, step=0):
    with open(path, "wb") as fh:
        fh.write(dumps(model, step))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
