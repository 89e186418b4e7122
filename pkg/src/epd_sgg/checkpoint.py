"""Checkpoint directories: ``manifest.json`` plus one raw float32 file per tensor."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .config import RunConfig
from .datamodel import DataError, PredicatePartition
from .model import RelationModel

CHECKPOINT_VERSION = 1
_LE_F32 = np.dtype("<f4")


def _file_name(name: str) -> str:
    return name + ".f32"


def save_checkpoint(model: RelationModel, partition: PredicatePartition | None, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    tensors = []
    entries = [(n, t.value) for n, t in model.named_parameters().items()]
    entries += [(n, v) for n, v in model.buffers().items()]
    for name, value in entries:
        arr = np.ascontiguousarray(value, dtype=_LE_F32)
        (path / _file_name(name)).write_bytes(arr.tobytes())
        tensors.append({"name": name, "shape": list(arr.shape), "file": _file_name(name)})
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "partition": partition.to_json() if partition is not None else None,
        "tensors": tensors,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_manifest(path) -> dict:
    mf = Path(path) / "manifest.json"
    if not mf.exists():
        raise DataError(f"{path}: not a checkpoint (manifest.json missing)")
    manifest = json.loads(mf.read_text(encoding="utf-8"))
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {manifest.get('format_version')}")
    return manifest


def load_checkpoint(path) -> tuple[RelationModel, PredicatePartition | None]:
    """Rebuild the model described by the manifest and fill in every tensor."""
    path = Path(path)
    manifest = read_manifest(path)
    model = RelationModel.create(RunConfig.from_dict(manifest["config"]))
    params = model.named_parameters()
    buffers = model.buffers()
    seen = set()
    for entry in manifest["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        raw = (path / entry["file"]).read_bytes()
        arr = np.frombuffer(raw, dtype=_LE_F32).astype(np.float32)
        if arr.size != int(np.prod(shape)):
            raise DataError(f"{path / entry['file']}: expected {int(np.prod(shape))} values, found {arr.size}")
        arr = arr.reshape(shape)
        if name in params:
            if params[name].shape != shape:
                raise DataError(f"{name}: checkpoint shape {shape} != model shape {params[name].shape}")
            params[name].value = arr.copy()
        elif name in buffers:
            model.set_buffer(name, arr)
        else:
            raise DataError(f"{path}: unknown tensor {name!r}")
        seen.add(name)
    missing = (set(params) | set(buffers)) - seen
    if missing:
        raise DataError(f"{path}: missing tensors {sorted(missing)}")
    model.zero_grad()
    part = manifest.get("partition")
    return model, PredicatePartition.from_json(part) if part else None

