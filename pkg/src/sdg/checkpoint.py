"""Versioned checkpoint container.

Layout: 8-byte magic, u32 format version, u64 header length, UTF-8 JSON
header, then the concatenated parameter payload as raw little-endian
float32 in header order. The header carries the model config, num_nodes,
the schedule (kind, K), a config hash for compatibility checks, and one
entry per parameter (name, shape, byte offset). Noise-schedule tables and
positional buffers are rebuilt deterministically on load, never stored.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np
import torch

from .model import SDGConfig, SDGModel

MAGIC = b"SDGCKPT\x00"
FORMAT_VERSION = 1


class CheckpointMismatchError(ValueError):
    """Checkpoint metadata is inconsistent with itself or with the data."""


def config_hash(config: SDGConfig, num_nodes: int) -> str:
    blob = json.dumps({"config": config.to_dict(), "num_nodes": num_nodes},
                      sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def save_checkpoint(model: SDGModel, path, extra: dict | None = None) -> None:
    params = []
    payload = bytearray()
    for name, p in model.named_parameters():
        arr = p.detach().cpu().to(torch.float32).numpy()
        params.append({"name": name, "shape": list(arr.shape),
                       "dtype": "float32", "offset": len(payload)})
        payload.extend(arr.astype("<f4").tobytes())
    header = {
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "num_nodes": model.num_nodes,
        "schedule": {"kind": model.schedule.kind, "K": model.schedule.K},
        "config_hash": config_hash(model.config, model.num_nodes),
        "params": params,
    }
    if extra:
        header["extra"] = extra
    hdr = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<Q", len(hdr)))
        f.write(hdr)
        f.write(bytes(payload))


def read_header(path) -> dict:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic)")
        (version,) = struct.unpack("<I", f.read(4))
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<Q", f.read(8))
        return json.loads(f.read(hlen).decode())


def load_checkpoint(path) -> tuple[SDGModel, dict]:
    """Rebuild the model from a checkpoint; returns (model, header)."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", blob[8:12])
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (hlen,) = struct.unpack("<Q", blob[12:20])
    header = json.loads(blob[20:20 + hlen].decode())
    body = blob[20 + hlen:]

    config = SDGConfig(**header["config"])
    model = SDGModel(config, header["num_nodes"])
    expected = config_hash(config, header["num_nodes"])
    if header.get("config_hash") != expected:
        raise CheckpointMismatchError(
            f"{path}: config hash mismatch (corrupt or edited header)")

    tensors = {}
    for meta in header["params"]:
        shape = tuple(meta["shape"])
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(body, dtype="<f4", count=n,
                            offset=meta["offset"]).reshape(shape)
        tensors[meta["name"]] = torch.from_numpy(arr.copy())
    expected_names = {n for n, _ in model.named_parameters()}
    if expected_names != set(tensors):
        missing = sorted(expected_names - set(tensors))
        extra = sorted(set(tensors) - expected_names)
        raise ValueError(f"{path}: parameter name mismatch "
                         f"(missing={missing}, extra={extra})")
    model.load_state_dict(tensors, strict=True)
    return model, header
