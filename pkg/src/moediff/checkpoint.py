"""Binary checkpoint format.

Layout (all integers little-endian u32):

    magic   4 bytes  "MDSQ"
    version u32      1
    cfg_len u32, followed by cfg_len bytes of UTF-8 config text
    then one record per tensor until end of file:
        name_len u32, name bytes (UTF-8)
        rank u32, rank * u32 dims
        little-endian float64 payload, prod(dims) * 8 bytes

Round trips are bit-exact: save -> load -> save reproduces the file.
"""

import struct

import numpy as np

from .errors import CheckpointError

MAGIC = b"MDSQ"
VERSION = 1


def save_checkpoint(path, config_text, tensors):
    """Write `tensors` (an ordered name -> ndarray mapping) plus the
    resolved config text."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        cfg = config_text.encode("utf-8")
        fh.write(struct.pack("<I", len(cfg)))
        fh.write(cfg)
        for name, arr in tensors.items():
            arr = np.asarray(arr, dtype=np.float64)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(arr.astype("<f8", copy=False).tobytes(order="C"))


def _take(buf, offset, n, what):
    if offset + n > len(buf):
        raise CheckpointError(f"checkpoint truncated while reading {what}")
    return buf[offset:offset + n], offset + n


def load_checkpoint(path):
    """Read a checkpoint; returns (config_text, ordered name -> ndarray)."""
    with open(path, "rb") as fh:
        buf = fh.read()
    raw, offset = _take(buf, 0, 4, "magic")
    if raw != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic {raw!r})")
    raw, offset = _take(buf, offset, 4, "version")
    version = struct.unpack("<I", raw)[0]
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    raw, offset = _take(buf, offset, 4, "config length")
    cfg_len = struct.unpack("<I", raw)[0]
    raw, offset = _take(buf, offset, cfg_len, "config text")
    config_text = raw.decode("utf-8")
    tensors = {}
    while offset < len(buf):
        raw, offset = _take(buf, offset, 4, "tensor name length")
        name_len = struct.unpack("<I", raw)[0]
        raw, offset = _take(buf, offset, name_len, "tensor name")
        name = raw.decode("utf-8")
        raw, offset = _take(buf, offset, 4, "tensor rank")
        rank = struct.unpack("<I", raw)[0]
        dims = []
        for _ in range(rank):
            raw, offset = _take(buf, offset, 4, f"dims of {name}")
            dims.append(struct.unpack("<I", raw)[0])
        count = int(np.prod(dims)) if dims else 1
        raw, offset = _take(buf, offset, 8 * count, f"payload of {name}")
        tensors[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(dims)
    return config_text, tensors


def load_into_model(path, model):
    """Restore a model's parameters in place; returns the stored config
    text. Shape or name mismatches raise `CheckpointError`."""
    config_text, tensors = load_checkpoint(path)
    params = model.parameters()
    if set(tensors) != set(params):
        missing = sorted(set(params) - set(tensors))
        extra = sorted(set(tensors) - set(params))
        raise CheckpointError(
            f"checkpoint does not match model (missing {missing}, extra {extra})"
        )
    for name, arr in tensors.items():
        if params[name].data.shape != arr.shape:
            raise CheckpointError(
                f"tensor {name} has shape {arr.shape}, model expects "
                f"{params[name].data.shape}"
            )
        params[name].data[...] = arr
    return config_text


def save_model(path, config_text, model):
    save_checkpoint(path, config_text, {k: v.data for k, v in model.parameters().items()})
