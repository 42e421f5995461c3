"""Checkpoint persistence: a JSON manifest next to one binary blob.

A checkpoint is a directory holding ``manifest.json`` and ``params.bin``.
The blob is the concatenation of every parameter in the tensor format of
:mod:`lrcs.tensor`, in :func:`~lrcs.network.named_parameters` order; the
manifest records each entry's shape and byte offset.  Values are stored as
float32, so a float32 model round-trips bit-exactly.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict

import numpy as np

from .network import ModelConfig, init_params, named_parameters
from .tensor import tensor_from_bytes, tensor_to_bytes

MANIFEST = "manifest.json"
BLOB = "params.bin"
FORMAT = "lrcs-checkpoint/1"


def _write_atomic(path, data):
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def save_checkpoint(path, params, meta=None):
    """Write ``params`` to the directory ``path``; returns ``path``."""
    path = os.fspath(path)
    os.makedirs(path, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name, t in named_parameters(params).items():
        raw = tensor_to_bytes(t.data)
        entries.append({"name": name, "shape": list(t.shape), "offset": offset,
                        "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format": FORMAT,
        "config": asdict(params.config),
        "stages": params.config.stages,
        "ratio": params.op.ratio,
        "blob": BLOB,
        "tensors": entries,
        "meta": meta or {},
    }
    # blob first: a manifest never points at a half-written blob
    _write_atomic(os.path.join(path, BLOB), b"".join(chunks))
    _write_atomic(os.path.join(path, MANIFEST),
                  json.dumps(manifest, indent=2).encode("utf-8"))
    return path


def read_manifest(path):
    try:
        with open(os.path.join(os.fspath(path), MANIFEST), encoding="utf-8") as fh:
            manifest = json.load(fh)
    except OSError as exc:
        raise OSError(f"cannot read checkpoint {path}: {exc.strerror}") from exc
    if manifest.get("format") != FORMAT:
        raise ValueError(f"{path}: not an lrcs checkpoint")
    return manifest


def load_checkpoint(path):
    """Rebuild the parameters stored at ``path``; returns ``(params, manifest)``."""
    manifest = read_manifest(path)
    config = ModelConfig(**manifest["config"])
    params = init_params(config, dtype=np.float32)
    params.op.ratio = manifest["ratio"]
    with open(os.path.join(os.fspath(path), manifest["blob"]), "rb") as fh:
        blob = fh.read()
    named = named_parameters(params)
    stored = {e["name"]: e for e in manifest["tensors"]}
    if set(stored) != set(named):
        missing = sorted(set(named) - set(stored))
        extra = sorted(set(stored) - set(named))
        raise ValueError(f"{path}: parameter mismatch (missing {missing}, unexpected {extra})")
    for name, t in named.items():
        entry = stored[name]
        arr, _ = tensor_from_bytes(blob, entry["offset"])
        if list(arr.shape) != entry["shape"] or arr.shape != t.shape:
            raise ValueError(f"{path}: {name} has shape {arr.shape}, expected {t.shape}")
        t.data = arr
    return params, manifest
