"""Binary checkpoint format for model parameters.

Layout (all integers and floats little-endian)::

    b"HSEG"  u32 version=1  u32 tensor_count
    per tensor: u16 name_len, name (ASCII), u8 rank, rank x u32 dims,
                prod(dims) x float32

Network configuration is not stored. It is recovered from parameter names
and shapes on load.
"""

import os
import re
import struct

import numpy as np

from hseg.errors import FormatError
from hseg.models import FlatCNet, HUNet, UNetConfig

MAGIC = b"HSEG"
VERSION = 1
HEADER_SIZE = 12


def encode(params):
    parts = [MAGIC, struct.pack("<II", VERSION, len(params))]
    for name, arr in params.items():
        raw = name.encode("ascii")
        arr = np.asarray(arr, dtype="<f4")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def encoded_size(params):
    size = HEADER_SIZE
    for name, arr in params.items():
        size += 2 + len(name.encode("ascii")) + 1 + 4 * np.ndim(arr) + 4 * np.size(arr)
    return size


def decode(buf, path=None):
    """Parse a checkpoint into an ordered ``{name: float32 array}`` mapping."""
    view = memoryview(buf)
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(view):
            raise FormatError(f"truncated checkpoint while reading {what}: need {n} bytes, "
                              f"{len(view) - pos} left", offset=pos, path=path)
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4, "magic")) != MAGIC:
        raise FormatError("bad magic bytes, expected b'HSEG'", offset=0, path=path)
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4, path=path)
    params = {}
    for _ in range(count):
        start = pos
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        try:
            name = bytes(take(name_len, "name")).decode("ascii")
        except UnicodeDecodeError:
            raise FormatError("tensor name is not ASCII", offset=start + 2, path=path) from None
        if name in params:
            raise FormatError(f"duplicate tensor name {name!r}", offset=start, path=path)
        (rank,) = struct.unpack("<B", take(1, "rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        n = int(np.prod(dims, dtype=np.int64))
        data = np.frombuffer(take(4 * n, f"data of {name!r}"), dtype="<f4")
        params[name] = data.astype(np.float32).reshape(dims)
    if pos != len(view):
        raise FormatError(f"{len(view) - pos} trailing bytes after last tensor", offset=pos, path=path)
    return params


def save_checkpoint(model, path):
    data = encode(model.params)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def _infer_unet(params, prefix, path):
    try:
        adapter = params[f"{prefix}.adapter.w"]
        depth = len({m.group(1) for k in params
                     if (m := re.match(rf"{re.escape(prefix)}\.enc(\d+)\.", k))})
        kernel = params[f"{prefix}.enc0.conv1.w"].shape[2]
        head = params[f"{prefix}.head.w"]
        return UNetConfig(depth, adapter.shape[0], adapter.shape[1], head.shape[0], kernel)
    except (KeyError, IndexError, ValueError) as exc:
        raise FormatError(f"cannot infer {prefix} configuration: {exc}", path=path) from None


def _check_layout(params, expected, path):
    want = {}
    for name, shape in expected:
        want[f"{name}.w"] = shape
        want[f"{name}.b"] = (shape[0],)
    got = {k: v.shape for k, v in params.items()}
    if got != want or list(params) != list(want):
        raise FormatError("parameter names/shapes do not match any known network layout", path=path)


def model_from_params(params, path=None):
    if any(k.startswith("lnet.") for k in params):
        lcfg = _infer_unet(params, "lnet", path)
        ccfg = _infer_unet(params, "cnet", path)
        _check_layout(params, lcfg.conv_shapes("lnet") + ccfg.conv_shapes("cnet"), path)
        return HUNet(lcfg, ccfg, params)
    ccfg = _infer_unet(params, "cnet", path)
    _check_layout(params, ccfg.conv_shapes("cnet"), path)
    return FlatCNet(ccfg, params)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    return model_from_params(decode(buf, path=path), path=path)
