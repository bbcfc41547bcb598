"""Checkpoint container: human-readable JSON manifest plus a packed payload
of little-endian float32 arrays.

A checkpoint is a directory holding ``manifest.json`` and ``payload.bin``.
Training state is float64; storage rounds to float32, which round-trips
forward outputs within about 1e-6.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .moe import MixtureOfExperts
from .nn import Model, build_model, spec_from_dict, spec_to_dict

__all__ = ["FORMAT_VERSION", "save_checkpoint", "load_checkpoint"]

FORMAT_VERSION = 1

_MANIFEST = "manifest.json"
_PAYLOAD = "payload.bin"


def save_checkpoint(obj, path, seed_lineage=None, metadata=None) -> None:
    """Write a Model or MixtureOfExperts to ``path`` (a directory)."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    if isinstance(obj, MixtureOfExperts):
        spec_entry = {
            "experts": [spec_to_dict(e.spec) for e in obj.experts],
            "roles": list(obj.expert_roles),
            "gate": spec_to_dict(obj.gate.spec),
        }
        kind = "moe"
    elif isinstance(obj, Model):
        spec_entry = spec_to_dict(obj.spec)
        kind = "model"
    else:
        raise CheckpointError(f"save_checkpoint: unsupported object {type(obj).__name__}")

    tensors = []
    chunks = []
    offset = 0
    for name, p in obj.parameters().items():
        raw = np.ascontiguousarray(p.data, dtype="<f4").tobytes()
        tensors.append({"name": name, "shape": list(p.data.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)

    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "spec": spec_entry,
        "seed_lineage": seed_lineage or {},
        "metadata": metadata or {},
        "tensors": tensors,
    }
    (out / _MANIFEST).write_text(json.dumps(manifest, indent=2))
    (out / _PAYLOAD).write_bytes(b"".join(chunks))


def _read_manifest(path: Path) -> dict:
    mpath = path / _MANIFEST
    if not mpath.is_file():
        raise CheckpointError(f"load_checkpoint: missing {mpath}")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as e:
        raise CheckpointError(f"load_checkpoint: unreadable manifest: {e}") from None
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"load_checkpoint: unsupported format_version {version!r}")
    return manifest


def _unpack_tensors(manifest: dict, payload: bytes) -> dict[str, np.ndarray]:
    arrays: dict[str, np.ndarray] = {}
    expected_offset = 0
    for entry in manifest["tensors"]:
        name, shape, offset = entry["name"], tuple(entry["shape"]), entry["offset"]
        if offset != expected_offset:
            raise CheckpointError(f"load_checkpoint: tensor {name!r} offset {offset}, expected {expected_offset}")
        nbytes = int(np.prod(shape)) * 4
        if offset + nbytes > len(payload):
            raise CheckpointError(f"load_checkpoint: truncated payload at tensor {name!r}")
        arr = np.frombuffer(payload, dtype="<f4", count=int(np.prod(shape)), offset=offset)
        arrays[name] = arr.reshape(shape).astype(np.float64)
        expected_offset = offset + nbytes
    if expected_offset != len(payload):
        raise CheckpointError(
            f"load_checkpoint: payload has {len(payload)} bytes, manifest accounts for {expected_offset}"
        )
    return arrays


def _assign(target, arrays: dict[str, np.ndarray], where: str) -> None:
    params = target.parameters()
    if set(params) != set(arrays):
        missing = sorted(set(params) - set(arrays))
        extra = sorted(set(arrays) - set(params))
        raise CheckpointError(f"load_checkpoint: {where} tensor names mismatch, missing {missing}, extra {extra}")
    for name, p in params.items():
        if arrays[name].shape != p.data.shape:
            raise CheckpointError(
                f"load_checkpoint: tensor {name!r} has shape {arrays[name].shape}, expected {p.data.shape}"
            )
        p.data = arrays[name]


def load_checkpoint(path):
    """Load a checkpoint directory back into a Model or MixtureOfExperts."""
    p = Path(path)
    manifest = _read_manifest(p)
    payload_path = p / _PAYLOAD
    if not payload_path.is_file():
        raise CheckpointError(f"load_checkpoint: missing {payload_path}")
    arrays = _unpack_tensors(manifest, payload_path.read_bytes())

    if manifest["kind"] == "model":
        model = build_model(spec_from_dict(manifest["spec"]), seed=0)
        _assign(model, arrays, "model")
        return model
    if manifest["kind"] == "moe":
        spec_entry = manifest["spec"]
        experts = [build_model(spec_from_dict(d), seed=0) for d in spec_entry["experts"]]
        gate = build_model(spec_from_dict(spec_entry["gate"]), seed=0)
        moe = MixtureOfExperts(experts, gate, spec_entry.get("roles"))
        _assign(moe, arrays, "moe")
        return moe
    raise CheckpointError(f"load_checkpoint: unknown kind {manifest['kind']!r}")
