"""Versioned binary network checkpoints.

Layout (little-endian)::

    b"DCKP" | u32 format_version | u32 header_len | header (UTF-8 JSON) | tensor blobs

The header records the network config, every tensor's name and shape (in
blob order), and free-form metadata. Blobs are raw f32. The JSON is written
with sorted keys so identical networks give byte-identical files.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataFormatError
from .nn import Network, NetworkConfig, build_network

DCKP_MAGIC = b"DCKP"
DCKP_VERSION = 1


def save_checkpoint(path, net: Network, meta: dict | None = None) -> None:
    state = net.state_dict()
    header = {
        "network": net.config.to_dict(),
        "dtype": "<f4",
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in state.items()],
        "meta": meta or {},
    }
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(DCKP_MAGIC)
        f.write(struct.pack("<II", DCKP_VERSION, len(raw)))
        f.write(raw)
        for v in state.values():
            f.write(np.ascontiguousarray(v, dtype="<f4").tobytes())


def read_checkpoint_header(path) -> dict:
    with open(path, "rb") as f:
        head = f.read(12)
        if len(head) < 12 or head[:4] != DCKP_MAGIC:
            raise DataFormatError(f"{path}: not a DCKP checkpoint")
        version, hlen = struct.unpack("<II", head[4:])
        if version != DCKP_VERSION:
            raise DataFormatError(f"{path}: unsupported checkpoint version {version}")
        return json.loads(f.read(hlen).decode())


def load_checkpoint(path) -> tuple[Network, dict]:
    data = Path(path).read_bytes()
    header = read_checkpoint_header(path)
    offset = 12 + struct.unpack("<I", data[8:12])[0]
    state = {}
    for t in header["tensors"]:
        count = int(np.prod(t["shape"], dtype=np.int64))
        end = offset + 4 * count
        if end > len(data):
            raise DataFormatError(f"{path}: truncated tensor {t['name']}")
        state[t["name"]] = np.frombuffer(data[offset:end], dtype="<f4").reshape(t["shape"])
        offset = end
    if offset != len(data):
        raise DataFormatError(f"{path}: {len(data) - offset} trailing bytes")
    config = NetworkConfig.from_dict(header["network"])
    net = build_network(config, seed=0)
    net.load_state_dict(state)
    return net, header["meta"]
