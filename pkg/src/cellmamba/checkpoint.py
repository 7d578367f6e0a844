"""Checkpoints: a JSON manifest plus one blob of little-endian float32 values.

Layout of a checkpoint directory::

    manifest.json   model config, tensor index, epoch, coupling mode, RNG state
    tensors.bin     every tensor's values, concatenated in index order

Each index entry is ``{"name", "shape", "offset", "count"}`` with ``offset`` in
bytes. Offsets partition the blob exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backbone import ModelConfig

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
BLOB = "tensors.bin"
_LE_F32 = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model_config: ModelConfig
    tensors: dict[str, np.ndarray]
    epoch: int = 0
    warmup_epochs: int = 1
    coupled: bool = False
    rng_state: dict | None = None
    extra: dict = field(default_factory=dict)


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    index = []
    offset = 0
    chunks = []
    for name, arr in ckpt.tensors.items():
        data = np.ascontiguousarray(arr, dtype=_LE_F32)
        index.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(data.size)})
        chunks.append(data.tobytes())
        offset += data.nbytes
    manifest = {
        "format_version": FORMAT_VERSION,
        "model_config": ckpt.model_config.to_dict(),
        "tensors": index,
        "blob_bytes": offset,
        "epoch": ckpt.epoch,
        "warmup_epochs": ckpt.warmup_epochs,
        "coupled": ckpt.coupled,
        "rng_state": ckpt.rng_state,
        "extra": ckpt.extra,
    }
    tmp_blob = path / (BLOB + ".tmp")
    tmp_blob.write_bytes(b"".join(chunks))
    tmp_blob.replace(path / BLOB)
    tmp_manifest = path / (MANIFEST + ".tmp")
    tmp_manifest.write_text(json.dumps(manifest, indent=1))
    tmp_manifest.replace(path / MANIFEST)
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not (path / MANIFEST).exists():
        raise CheckpointError(f"no checkpoint manifest in {path}")
    manifest = json.loads((path / MANIFEST).read_text())
    blob = (path / BLOB).read_bytes()
    if len(blob) != manifest["blob_bytes"]:
        raise CheckpointError(f"blob is {len(blob)} bytes, manifest expects {manifest['blob_bytes']}")
    tensors = {}
    expected = 0
    for entry in manifest["tensors"]:
        if entry["offset"] != expected:
            raise CheckpointError(f"tensor {entry['name']} does not start where the previous one ended")
        arr = np.frombuffer(blob, dtype=_LE_F32, count=entry["count"], offset=entry["offset"])
        tensors[entry["name"]] = arr.astype(np.float32).reshape(entry["shape"])
        expected += entry["count"] * _LE_F32.itemsize
    if expected != len(blob):
        raise CheckpointError("tensor index does not cover the blob")
    return Checkpoint(
        model_config=ModelConfig.from_dict(manifest["model_config"]),
        tensors=tensors,
        epoch=manifest["epoch"],
        warmup_epochs=manifest["warmup_epochs"],
        coupled=manifest["coupled"],
        rng_state=manifest.get("rng_state"),
        extra=manifest.get("extra", {}),
    )
