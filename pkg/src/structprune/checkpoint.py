"""Checkpoints: a JSON manifest plus one raw little-endian float32 blob per tensor.

Layout::

    <dir>/manifest.json
    <dir>/tensors/<name>.f32

The manifest holds the architecture descriptor, the per-block channel
masks, optimizer metadata, and an index entry (file, shape) per tensor.
Both parameters and batch-norm running statistics are stored.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .arch import ArchDescriptor
from .layers import Network, build_network, set_masks

CHECKPOINT_SCHEMA = "structprune.checkpoint/1"
_LE_F32 = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


def _arrays(network: Network):
    for name, p in network.named_parameters():
        yield "param", name, p.data
    for name, buf in network.named_buffers():
        yield "buffer", name, buf


def save_checkpoint(path, network: Network, optimizer: dict | None = None, meta: dict | None = None) -> Path:
    root = Path(path)
    (root / "tensors").mkdir(parents=True, exist_ok=True)
    index = []
    for kind, name, arr in _arrays(network):
        fname = f"tensors/{kind}.{name}.f32"
        (root / fname).write_bytes(np.ascontiguousarray(arr, dtype=_LE_F32).tobytes())
        index.append({"kind": kind, "name": name, "file": fname, "shape": list(arr.shape), "dtype": "<f4"})
    manifest = {
        "schema": CHECKPOINT_SCHEMA,
        "arch": network.arch.to_dict(),
        "masks": [b.mask.keep.astype(int).tolist() for b in network.blocks],
        "optimizer": optimizer or {},
        "meta": meta or {},
        "tensors": index,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    return root


def read_manifest(path) -> dict:
    mpath = Path(path) / "manifest.json"
    if not mpath.exists():
        raise CheckpointError(f"no checkpoint manifest at {mpath}")
    try:
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{mpath}: invalid JSON ({exc})") from exc
    if not isinstance(manifest, dict) or manifest.get("schema") != CHECKPOINT_SCHEMA:
        raise CheckpointError(f"unsupported checkpoint schema {manifest.get('schema')!r}")
    return manifest


def load_checkpoint(path) -> tuple[Network, dict]:
    root = Path(path)
    manifest = read_manifest(root)
    network = build_network(ArchDescriptor.from_dict(manifest["arch"]))
    set_masks(network, [np.asarray(m, dtype=bool) for m in manifest["masks"]])
    params = dict(network.named_parameters())
    buffers = dict(network.named_buffers())
    for entry in manifest["tensors"]:
        raw = (root / entry["file"]).read_bytes()
        shape = tuple(entry["shape"])
        arr = np.frombuffer(raw, dtype=_LE_F32)
        if arr.size != int(np.prod(shape)):
            raise CheckpointError(f"{entry['file']}: expected {int(np.prod(shape)) * 4} bytes, found {len(raw)}")
        arr = arr.reshape(shape)
        if entry["kind"] == "param":
            target = params[entry["name"]].data
        else:
            target = buffers[entry["name"]]
        if target.shape != shape:
            raise CheckpointError(f"{entry['name']}: shape {shape} does not match architecture {target.shape}")
        target[...] = arr
    return network, manifest
