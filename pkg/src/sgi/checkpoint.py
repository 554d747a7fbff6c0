"""Binary checkpoint files.

Layout (little-endian)::

    b"SGIC"            magic
    u16                format version
    u32                header length N
    N bytes            UTF-8 JSON header: net config, provenance, tensor directory
    ...                raw tensor blobs in directory order

Each directory entry is ``{"side", "name", "shape", "dtype", "nbytes"}``. Blobs
are written in C order with an explicit little-endian dtype, so a load
reproduces every parameter bit for bit.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .agent import AgentCheckpoint, CheckpointFormatError
from .diffcore import Tensor
from .nets import Network, NetConfig, _init_shapes, TARGET_BLOCKS

MAGIC = b"SGIC"
VERSION = 1
_PREFIX = struct.Struct("<4sHI")


def checkpoint_bytes(ck: AgentCheckpoint) -> bytes:
    net = ck.network
    directory, blobs = [], []
    for side, params in (("online", net.online), ("target", net.target)):
        for name in sorted(params):
            arr = np.ascontiguousarray(params[name].data)
            le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            directory.append({"side": side, "name": name, "shape": list(arr.shape),
                              "dtype": le.dtype.str, "nbytes": le.nbytes})
            blobs.append(le.tobytes())
    header = {"net": net.cfg.to_dict(), "fingerprint": ck.fingerprint, "provenance": ck.provenance,
              "tensors": directory}
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return _PREFIX.pack(MAGIC, VERSION, len(head)) + head + b"".join(blobs)


def save_checkpoint(ck: AgentCheckpoint, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(ck))


def parse_checkpoint(raw: bytes) -> AgentCheckpoint:
    if len(raw) < _PREFIX.size:
        raise CheckpointFormatError("file too short for a checkpoint")
    magic, version, n = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointFormatError("not a checkpoint file (bad magic)")
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(raw[_PREFIX.size:_PREFIX.size + n].decode())
        cfg = NetConfig.from_dict(header["net"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CheckpointFormatError(f"corrupt checkpoint header: {exc}") from None
    if header.get("fingerprint") != cfg.fingerprint():
        raise CheckpointFormatError("stored fingerprint does not match the stored architecture")
    expected = {k: shape for k, (shape, _) in _init_shapes(cfg).items()}
    online, target = {}, {}
    pos = _PREFIX.size + n
    for entry in header["tensors"]:
        name, side, shape = entry["name"], entry["side"], tuple(entry["shape"])
        if name not in expected:
            raise CheckpointFormatError(f"unexpected tensor {name!r}")
        if shape != tuple(expected[name]):
            raise CheckpointFormatError(f"tensor {name!r} has shape {shape}, expected {tuple(expected[name])}")
        dtype = np.dtype(entry["dtype"])
        nbytes = int(entry["nbytes"])
        if nbytes != dtype.itemsize * int(np.prod(shape, dtype=np.int64)) or pos + nbytes > len(raw):
            raise CheckpointFormatError(f"truncated or inconsistent blob for {name!r}")
        data = np.frombuffer(raw, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos).reshape(shape)
        data = data.astype(dtype.newbyteorder("="))
        pos += nbytes
        if side == "online":
            online[name] = Tensor(data, requires_grad=True, name=name)
        elif side == "target":
            target[name] = Tensor(data, name=name)
        else:
            raise CheckpointFormatError(f"unknown parameter side {side!r}")
    if pos != len(raw):
        raise CheckpointFormatError("trailing bytes after the last tensor")
    if set(online) != set(expected):
        raise CheckpointFormatError("checkpoint is missing online parameters")
    if set(target) != {k for k in expected if k.split(".")[0] in TARGET_BLOCKS}:
        raise CheckpointFormatError("checkpoint target parameters are incomplete")
    return AgentCheckpoint(Network(cfg, online, target), header.get("provenance", {}))


def load_checkpoint(path) -> AgentCheckpoint:
    return parse_checkpoint(Path(path).read_bytes())
