"""JSON checkpoints: config echo plus every parameter as a flat decimal list.

Floats are written with ``repr`` semantics (the json module default), which
round-trips float64 exactly.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..encoder import Encoder

FORMAT = "tokengate-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


def checkpoint_dict(model: Encoder, config: dict, params: dict[str, np.ndarray] | None = None) -> dict:
    named = params if params is not None else {n: t.data for n, t in model.named_parameters()}
    return {
        "format": FORMAT,
        "version": VERSION,
        "config": config,
        "dtype": str(model.dtype),
        "parameters": [{"name": n, "shape": list(a.shape), "values": a.reshape(-1).tolist()}
                       for n, a in named.items()],
    }


def save_checkpoint(path: str | Path, model: Encoder, config: dict,
                    params: dict[str, np.ndarray] | None = None) -> None:
    Path(path).write_text(json.dumps(checkpoint_dict(model, config, params)) + "\n")


def read_checkpoint(path: str | Path) -> dict:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise CheckpointError(f"checkpoint not found: {path}") from exc
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"checkpoint {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != FORMAT:
        raise CheckpointError(f"{path} is not a {FORMAT} document")
    if doc.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {doc.get('version')!r}")
    for key in ("config", "parameters"):
        if key not in doc:
            raise CheckpointError(f"{path}: missing {key!r}")
    return doc


def load_into(model: Encoder, doc: dict) -> Encoder:
    tensors = dict(model.named_parameters())
    seen = set()
    for entry in doc["parameters"]:
        try:
            name, shape, values = entry["name"], tuple(entry["shape"]), entry["values"]
        except (KeyError, TypeError) as exc:
            raise CheckpointError(f"malformed parameter entry: {exc}") from exc
        if name not in tensors:
            raise CheckpointError(f"unexpected parameter {name!r}")
        target = tensors[name]
        arr = np.asarray(values, dtype=model.dtype)
        if target.shape != shape or arr.size != target.size:
            raise CheckpointError(f"parameter {name!r}: shape {shape} does not match model {target.shape}")
        target.data[...] = arr.reshape(shape)
        seen.add(name)
    missing = set(tensors) - seen
    if missing:
        raise CheckpointError(f"checkpoint lacks parameter(s) {sorted(missing)[:3]}")
    return model
