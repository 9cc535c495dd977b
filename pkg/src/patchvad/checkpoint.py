"""Checkpoint serialization.

A checkpoint is a plain-text manifest followed by one binary blob of
little-endian 32-bit floats:

    patchvad-checkpoint 1
    config {...canonical JSON...}
    confighash <12 hex chars>
    tensor <name> <dim,dim,...> <byte offset>
    ...
    blob <total bytes>
    <raw float32 data>

Tensor names and order come from the model's deterministic enumeration;
batch-norm running statistics are included. Saving the same model state
twice yields byte-identical files.
"""

from __future__ import annotations

import hashlib
import json

import numpy as np

from .errors import DataError
from .model import HybridModel, ModelConfig

MAGIC = "patchvad-checkpoint"
VERSION = 1


def canonical_config_json(config: ModelConfig) -> str:
    return json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":"))


def config_hash(config: ModelConfig) -> str:
    return hashlib.sha256(canonical_config_json(config).encode()).hexdigest()[:12]


def save_checkpoint(path, model: HybridModel) -> None:
    tensors = model.named_tensors()
    lines = [f"{MAGIC} {VERSION}",
             f"config {canonical_config_json(model.config)}",
             f"confighash {config_hash(model.config)}"]
    offset = 0
    blobs = []
    for name, arr in tensors:
        a = np.ascontiguousarray(arr, dtype="<f4")
        shape = ",".join(str(s) for s in a.shape)
        lines.append(f"tensor {name} {shape} {offset}")
        blobs.append(a.tobytes())
        offset += len(blobs[-1])
    lines.append(f"blob {offset}")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode())
        for b in blobs:
            fh.write(b)


def read_manifest(path) -> tuple[ModelConfig, list[tuple[str, tuple, int]], int, int]:
    """Parse the text header. Returns (config, tensor entries, blob size, blob start)."""
    entries = []
    config = None
    declared_hash = None
    blob_size = None
    with open(path, "rb") as fh:
        first = fh.readline().decode(errors="replace").rstrip("\n")
        if not first.startswith(MAGIC + " "):
            raise DataError(f"{path}: not a checkpoint file")
        if first.split()[-1] != str(VERSION):
            raise DataError(f"{path}: unsupported checkpoint version "
                            f"{first.split()[-1]}")
        while True:
            line = fh.readline()
            if not line:
                raise DataError(f"{path}: truncated checkpoint header")
            text = line.decode(errors="replace").rstrip("\n")
            if text.startswith("config "):
                config = ModelConfig.from_dict(json.loads(text[len("config "):]))
            elif text.startswith("confighash "):
                declared_hash = text.split()[1]
            elif text.startswith("tensor "):
                _, name, shape_s, off_s = text.split()
                shape = tuple(int(s) for s in shape_s.split(",")) if shape_s else ()
                entries.append((name, shape, int(off_s)))
            elif text.startswith("blob "):
                blob_size = int(text.split()[1])
                break
            else:
                raise DataError(f"{path}: unrecognized manifest line {text!r}")
        blob_start = fh.tell()
    if config is None or blob_size is None:
        raise DataError(f"{path}: incomplete checkpoint manifest")
    if declared_hash != config_hash(config):
        raise DataError(f"{path}: config hash mismatch")
    return config, entries, blob_size, blob_start


def load_checkpoint(path) -> HybridModel:
    """Rebuild the model named by the embedded config and load its weights."""
    config, entries, blob_size, blob_start = read_manifest(path)
    with open(path, "rb") as fh:
        fh.seek(blob_start)
        blob = fh.read()
    if len(blob) != blob_size:
        raise DataError(f"{path}: blob size {len(blob)} != declared {blob_size}")
    model = HybridModel(config, seed=0)
    want = dict(model.named_tensors())
    seen = set()
    for name, shape, off in entries:
        if name not in want:
            raise DataError(f"{path}: unknown tensor {name!r} for this architecture")
        target = want[name]
        if tuple(target.shape) != shape:
            raise DataError(f"{path}: tensor {name} shape {shape} != "
                            f"expected {tuple(target.shape)}")
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        data = np.frombuffer(blob, dtype="<f4", count=count, offset=off)
        target[...] = data.reshape(shape)
        seen.add(name)
    missing = set(want) - seen
    if missing:
        raise DataError(f"{path}: missing tensors {sorted(missing)[:3]}")
    return model


def file_hash(path) -> str:
    """SHA-256 of the whole checkpoint file; used for provenance headers."""
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
