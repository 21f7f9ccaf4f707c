"""Checkpoint directory format.

A checkpoint is a directory holding

* ``manifest.json``: format version, model config, train config, seed,
  corpus id, provenance, and an index of ``(name, shape, offset, nbytes)``
* ``tensors.bin``: every tensor as raw little-endian float64, concatenated in
  index order.

Round trips are bit-exact. Nothing time-dependent is written, so identical
runs produce byte-identical directories.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError
from .model import ModelConfig, ParameterBank

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
BLOB = "tensors.bin"


@dataclass
class Checkpoint:
    config: ModelConfig
    bank: ParameterBank
    train_config: dict = field(default_factory=dict)
    seed: int = 0
    corpus_id: str = ""
    provenance: dict = field(default_factory=dict)


def save_tensors(path, arrays: dict, meta: dict) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    index, offset = [], 0
    with open(path / BLOB, "wb") as fh:
        for name, arr in arrays.items():
            raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            fh.write(raw)
            index.append({"name": name, "shape": list(np.shape(arr)),
                          "offset": offset, "nbytes": len(raw)})
            offset += len(raw)
    manifest = {"format_version": FORMAT_VERSION, **meta, "index": index}
    (path / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_tensors(path):
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text())
    except FileNotFoundError as exc:
        raise DataError(f"no checkpoint manifest in {path}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DataError(f"unsupported checkpoint format {manifest.get('format_version')}")
    blob = (path / BLOB).read_bytes()
    arrays = {}
    for entry in manifest["index"]:
        lo, n = entry["offset"], entry["nbytes"]
        if lo + n > len(blob):
            raise DataError(f"tensor {entry['name']} runs past the end of {BLOB}")
        arr = np.frombuffer(blob[lo:lo + n], dtype="<f8").astype(np.float64)
        arrays[entry["name"]] = arr.reshape(entry["shape"])
    return arrays, manifest


def save(ckpt: Checkpoint, path) -> Path:
    meta = {
        "kind": "model",
        "config": ckpt.config.to_dict(),
        "train_config": ckpt.train_config,
        "seed": ckpt.seed,
        "corpus_id": ckpt.corpus_id,
        "provenance": ckpt.provenance,
    }
    save_tensors(path, ckpt.bank.state(), meta)
    return Path(path)


def load(path) -> Checkpoint:
    arrays, manifest = load_tensors(path)
    if manifest.get("kind") != "model":
        raise DataError(f"{path} is not a model checkpoint")
    config = ModelConfig(**manifest["config"])
    return Checkpoint(config=config, bank=ParameterBank.from_state(arrays, config.n),
                      train_config=manifest.get("train_config", {}), seed=manifest.get("seed", 0),
                      corpus_id=manifest.get("corpus_id", ""),
                      provenance=manifest.get("provenance", {}))


def digest(path) -> str:
    """SHA-256 over the manifest and blob; equal digests mean byte-identical checkpoints."""
    h = hashlib.sha256()
    for name in (MANIFEST, BLOB):
        h.update((Path(path) / name).read_bytes())
    return h.hexdigest()


def same_bytes(path_a, path_b) -> bool:
    return all((Path(path_a) / n).read_bytes() == (Path(path_b) / n).read_bytes()
               for n in (MANIFEST, BLOB))
