"""Checkpoint files.

Layout: u64 little-endian header length, a UTF-8 JSON header, then the
concatenated float32 little-endian tensors listed in the header.
"""

from __future__ import annotations

import json
import math
import struct
from pathlib import Path

import numpy as np

from .swin import ModelConfig, param_shapes
from .tensor import Tensor

FORMAT = "stimswin-checkpoint/1"
TRAINING_ONLY_PREFIXES = ("proj.",)


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, config: dict, params: dict, inference_only: bool = False, opt_state=None) -> None:
    """Write ``params`` (and optionally optimizer moments) under ``config``.

    ``config`` must contain a ``"model"`` mapping accepted by :meth:`ModelConfig.from_dict`.
    ``inference_only`` drops the training-only projection and the optimizer state.
    """
    if "model" not in config:
        raise CheckpointError("checkpoint config needs a 'model' entry")
    tensors = []
    for name, p in params.items():
        if inference_only and name.startswith(TRAINING_ONLY_PREFIXES):
            continue
        tensors.append((name, p.data if isinstance(p, Tensor) else np.asarray(p)))
    step = None
    if opt_state is not None and not inference_only:
        step = opt_state.step
        for name, _ in list(tensors):
            tensors.append((f"opt.m.{name}", opt_state.m[name]))
            tensors.append((f"opt.v.{name}", opt_state.v[name]))
    entries, blobs, offset = [], [], 0
    for name, arr in tensors:
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"format": FORMAT, "config": config, "inference_only": inference_only,
                         "optimizer_step": step, "tensors": entries}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def _read(path):
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise CheckpointError(f"{path}: truncated checkpoint")
    (n,) = struct.unpack("<Q", raw[:8])
    if 8 + n > len(raw):
        raise CheckpointError(f"{path}: header length {n} exceeds file size")
    try:
        header = json.loads(raw[8:8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header") from exc
    if header.get("format") != FORMAT:
        raise CheckpointError(f"{path}: not a {FORMAT} file")
    return header, memoryview(raw)[8 + n:]


def load_checkpoint(path, expect_model: ModelConfig | None = None, as_tensors: bool = True):
    """Return ``(config, params, optimizer)``; ``optimizer`` is ``None`` when absent.

    Tensor names and shapes are checked against the model config stored in the
    header, and against ``expect_model`` when given.
    """
    header, payload = _read(path)
    config = header["config"]
    model = ModelConfig.from_dict(config["model"])
    if expect_model is not None and expect_model != model:
        raise CheckpointError(f"{path}: checkpoint model {model} differs from expected {expect_model}")
    expected = param_shapes(model)
    arrays = {}
    end = 0
    for e in header["tensors"]:
        shape = tuple(e["shape"])
        nbytes = math.prod(shape) * 4
        if e["offset"] != end or e["offset"] + nbytes > len(payload):
            raise CheckpointError(f"{path}: tensor {e['name']} does not match the blob layout")
        arrays[e["name"]] = np.frombuffer(payload[e["offset"]:e["offset"] + nbytes], dtype="<f4").reshape(shape).astype(np.float32)
        end += nbytes
    if end != len(payload):
        raise CheckpointError(f"{path}: {len(payload) - end} trailing bytes after the last tensor")

    params, m, v = {}, {}, {}
    for name, arr in arrays.items():
        if name.startswith("opt.m."):
            m[name[6:]] = arr
        elif name.startswith("opt.v."):
            v[name[6:]] = arr
        elif name in expected:
            if arr.shape != tuple(expected[name]):
                raise CheckpointError(f"{path}: {name} has shape {arr.shape}, model expects {expected[name]}")
            params[name] = arr
        elif name.startswith(TRAINING_ONLY_PREFIXES):
            params[name] = arr
        else:
            raise CheckpointError(f"{path}: unknown parameter {name!r}")
    missing = sorted(set(expected) - set(params))
    if missing:
        raise CheckpointError(f"{path}: missing parameters {missing[:5]}")
    if as_tensors:
        params = {k: Tensor(a, requires_grad=True) for k, a in params.items()}
    optimizer = None
    if header.get("optimizer_step") is not None:
        from .training import OptimizerState

        optimizer = OptimizerState(m, v, int(header["optimizer_step"]))
    return config, params, optimizer
