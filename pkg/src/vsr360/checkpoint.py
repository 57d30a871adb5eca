"""Bit-exact little-endian checkpoint files.

Layout::

    magic "SMFN" | format version u32
    config entry count u32
    per entry: key len u32, key utf-8, type u8 (0=int64, 1=float64, 2=bool), value
    tensor count u64
    per tensor: name len u32, name utf-8, rank u32, extents u64 each, fp32 payload

Model parameters are stored under their parameter names; optimizer state is
appended with an ``adam/`` name prefix (``adam/m/<name>``, ``adam/v/<name>``
and the step counter ``adam/t``).
"""

from __future__ import annotations

import struct

import numpy as np

from .model import SmfnConfig

MAGIC = b"SMFN"
FORMAT_VERSION = 1

_TYPE_INT = 0
_TYPE_FLOAT = 1
_TYPE_BOOL = 2


def _write_str(f, s):
    raw = s.encode("utf-8")
    f.write(struct.pack("<I", len(raw)))
    f.write(raw)


def _read_str(f):
    (n,) = struct.unpack("<I", f.read(4))
    return f.read(n).decode("utf-8")


def _write_tensor(f, name, arr):
    arr = np.ascontiguousarray(arr, dtype="<f4")
    _write_str(f, name)
    f.write(struct.pack("<I", arr.ndim))
    for ext in arr.shape:
        f.write(struct.pack("<Q", ext))
    f.write(arr.tobytes())


def _read_tensor(f):
    name = _read_str(f)
    (rank,) = struct.unpack("<I", f.read(4))
    shape = tuple(struct.unpack("<Q", f.read(8))[0] for _ in range(rank))
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(f.read(4 * count), dtype="<f4").reshape(shape)
    return name, data.copy()


def save_checkpoint(path, config: SmfnConfig, tensors, adam_state=None):
    """Write config + named fp32 tensors (+ optional Adam state) to ``path``.

    ``tensors`` maps name -> Tensor or numpy array.  Output is byte-identical
    for identical inputs.
    """
    items = [(k, _data(v)) for k, v in sorted(tensors.items())]
    adam_items = []
    if adam_state is not None:
        adam_items.append(("adam/t", np.array([adam_state.t], dtype=np.float32)))
        for k in sorted(adam_state.m):
            adam_items.append((f"adam/m/{k}", _data(adam_state.m[k])))
        for k in sorted(adam_state.v):
            adam_items.append((f"adam/v/{k}", _data(adam_state.v[k])))

    cfg = config.to_dict()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<I", len(cfg)))
        for key in sorted(cfg):
            val = cfg[key]
            _write_str(f, key)
            if isinstance(val, bool):
                f.write(struct.pack("<Bb", _TYPE_BOOL, int(val)))
            elif isinstance(val, int):
                f.write(struct.pack("<Bq", _TYPE_INT, val))
            else:
                f.write(struct.pack("<Bd", _TYPE_FLOAT, float(val)))
        f.write(struct.pack("<Q", len(items) + len(adam_items)))
        for name, arr in items + adam_items:
            _write_tensor(f, name, arr)


def _data(v):
    return v.data if hasattr(v, "data") and not isinstance(v, np.ndarray) else np.asarray(v)


def load_checkpoint(path):
    """Returns (SmfnConfig, {name: fp32 array}, adam dict or None).

    The adam dict has keys "t", "m", "v" when optimizer state is present.
    """
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic)")
        (version,) = struct.unpack("<I", f.read(4))
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported format version {version}")
        (ncfg,) = struct.unpack("<I", f.read(4))
        cfg = {}
        for _ in range(ncfg):
            key = _read_str(f)
            (tcode,) = struct.unpack("<B", f.read(1))
            if tcode == _TYPE_BOOL:
                cfg[key] = bool(struct.unpack("<b", f.read(1))[0])
            elif tcode == _TYPE_INT:
                cfg[key] = struct.unpack("<q", f.read(8))[0]
            elif tcode == _TYPE_FLOAT:
                cfg[key] = struct.unpack("<d", f.read(8))[0]
            else:
                raise ValueError(f"{path}: unknown config value type {tcode}")
        (ntensors,) = struct.unpack("<Q", f.read(8))
        tensors, adam_m, adam_v, adam_t = {}, {}, {}, None
        for _ in range(ntensors):
            name, arr = _read_tensor(f)
            if name == "adam/t":
                adam_t = int(arr[0])
            elif name.startswith("adam/m/"):
                adam_m[name[len("adam/m/"):]] = arr
            elif name.startswith("adam/v/"):
                adam_v[name[len("adam/v/"):]] = arr
            else:
                tensors[name] = arr
    adam = {"t": adam_t, "m": adam_m, "v": adam_v} if adam_t is not None else None
    return SmfnConfig.from_dict(cfg), tensors, adam
