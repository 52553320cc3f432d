"""Canonical text checkpoints.

Layout (JSON, keys sorted, two-space indent, trailing newline)::

    {
      "config": {"d_head": .., "d_model": .., "max_seq": .., "n_heads": ..,
                 "n_layers": .., "vocab_size": ..},
      "format_version": 1,
      "provenance": {"kind": "wired" | "trained", "seed": int | null,
                     "train_steps": int},
      "weights": {"<param>": {"shape": [...], "data": ["<hex float>", ...]}, ...}
    }

``data`` is the row-major flattening of the array, each value written with
``float.hex`` so a load restores every bit.  Parameter names are those of
``ModelWeights``.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from ..transformer import PARAM_NAMES, ModelConfig, ModelError, ModelWeights

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _encode(arr: np.ndarray) -> dict:
    return {"shape": list(arr.shape), "data": [float(x).hex() for x in arr.ravel()]}


def _decode(name: str, blob: dict) -> np.ndarray:
    try:
        shape = tuple(int(s) for s in blob["shape"])
        data = [float.fromhex(x) for x in blob["data"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"malformed array {name!r}: {exc}") from exc
    if len(data) != int(np.prod(shape)):
        raise CheckpointError(f"array {name!r} has {len(data)} values for shape {shape}")
    return np.array(data, dtype=np.float64).reshape(shape)


def dumps_checkpoint(weights: ModelWeights, provenance: dict | None = None) -> str:
    prov = {"kind": "wired", "seed": None, "train_steps": 0}
    prov.update(provenance or {})
    doc = {
        "config": weights.cfg.to_dict(),
        "format_version": FORMAT_VERSION,
        "provenance": prov,
        "weights": {name: _encode(arr) for name, arr in weights.params().items()},
    }
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def loads_checkpoint(text: str) -> tuple[ModelWeights, dict]:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"checkpoint is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise CheckpointError("checkpoint root must be an object")
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format_version {version!r}")
    try:
        cfg = ModelConfig(**doc["config"])
        blobs = doc["weights"]
    except (KeyError, TypeError, ModelError) as exc:
        raise CheckpointError(f"bad config section: {exc}") from exc
    missing = set(PARAM_NAMES) - set(blobs)
    if missing:
        raise CheckpointError(f"missing arrays: {sorted(missing)}")
    arrays = {name: _decode(name, blobs[name]) for name in PARAM_NAMES}
    try:
        weights = ModelWeights(cfg, **arrays)
    except ModelError as exc:
        raise CheckpointError(f"weights do not match embedded config: {exc}") from exc
    return weights, doc.get("provenance", {})


def save_checkpoint(weights: ModelWeights, path: str | Path, provenance: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_checkpoint(weights, provenance))
    return path


def load_checkpoint(path: str | Path) -> tuple[ModelWeights, dict]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return loads_checkpoint(text)


def weights_digest(weights: ModelWeights) -> str:
    """SHA-256 of the canonical serialization of the weights alone."""
    return hashlib.sha256(dumps_checkpoint(weights, {"kind": "digest"}).encode()).hexdigest()
