"""Versioned JSON tensor dumps.

A checkpoint is one UTF-8 JSON object::

    {"format": "proctrack-checkpoint", "version": 1, "task": "procedural" | "story",
     "meta": {...model settings...},
     "tensors": {name: {"shape": [...], "data": [flat float64 values]}},
     "transitions": {name: {"blocked": [[...]], "counts": [[...]], "labels": [...]}}}

Floats are written with ``repr`` precision, so a load/save round trip is
lossless and identical parameters always produce identical bytes.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .crf import TransitionMatrix
from .errors import IOFailure, ValidationError
from .numerics import DTYPE, Tensor

FORMAT = "proctrack-checkpoint"
VERSION = 1


def tensors_to_json(params: dict[str, Tensor]) -> dict:
    return {
        name: {"shape": list(t.shape), "data": t.data.reshape(-1).tolist()}
        for name, t in sorted(params.items())
    }


def tensors_from_json(obj: dict) -> dict[str, Tensor]:
    out = {}
    for name, item in obj.items():
        data = np.array(item["data"], dtype=DTYPE)
        shape = tuple(item["shape"])
        if data.size != int(np.prod(shape)):
            raise ValidationError(f"tensor {name!r}: {data.size} values for shape {list(shape)}")
        out[name] = Tensor(data.reshape(shape), requires_grad=True, name=name)
    return out


def transitions_to_json(tm: TransitionMatrix) -> dict:
    return {"blocked": tm.blocked.tolist(), "counts": tm.counts.tolist(), "labels": tm.labels}


def transitions_from_json(obj: dict, scores: Tensor) -> TransitionMatrix:
    blocked = np.array(obj["blocked"], dtype=bool)
    if blocked.shape != scores.shape:
        raise ValidationError(f"blocked mask {blocked.shape} does not match scores {scores.shape}")
    return TransitionMatrix(scores, blocked, np.array(obj["counts"], dtype=np.int64), obj.get("labels"))


def dumps(task: str, meta: dict, params: dict[str, Tensor], transitions: dict[str, TransitionMatrix]) -> str:
    payload = {
        "format": FORMAT,
        "version": VERSION,
        "task": task,
        "meta": meta,
        "tensors": tensors_to_json(params),
        "transitions": {k: transitions_to_json(v) for k, v in sorted(transitions.items())},
    }
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def loads(text: str) -> dict:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"checkpoint is not valid JSON: {exc.msg}") from None
    if obj.get("format") != FORMAT:
        raise ValidationError("not a proctrack checkpoint")
    if obj.get("version") != VERSION:
        raise ValidationError(f"unsupported checkpoint version {obj.get('version')!r}")
    params = tensors_from_json(obj["tensors"])
    transitions = {}
    for name, item in obj["transitions"].items():
        if name not in params:
            raise ValidationError(f"transition matrix {name!r} has no score tensor")
        transitions[name] = transitions_from_json(item, params[name])
    return {"task": obj["task"], "meta": obj["meta"], "params": params, "transitions": transitions}


def write(path: str | Path, text: str) -> str:
    """Write and return the sha256 of the bytes written."""
    data = text.encode("utf-8")
    try:
        Path(path).write_bytes(data)
    except OSError as exc:
        raise IOFailure(f"cannot write {path}: {exc}") from exc
    return hashlib.sha256(data).hexdigest()


def read(path: str | Path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IOFailure(f"cannot read {path}: {exc}") from exc
    return loads(text)
