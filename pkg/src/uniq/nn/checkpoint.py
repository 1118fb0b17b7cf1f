"""Checkpoint container: JSON header + raw little-endian float32 payloads.

Layout: the magic string ``UNIQCKPT1``, a little-endian uint32 header
length, the UTF-8 JSON header, then the tensor payloads concatenated in
header order.  The header carries the architecture, the precision map and
the step sizes; weights, biases and batch-norm buffers go in the payload.
Serialization is deterministic (sorted JSON keys, fixed tensor order), so
identical models produce byte-identical files.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"UNIQCKPT1"
VERSION = 1


class CheckpointError(RuntimeError):
    """Malformed checkpoint file or model/checkpoint mismatch."""


def _step_sizes(model) -> dict:
    steps = {}
    for name, step, _, _ in model.weight_quantizers():
        steps[name] = step.delta.tolist() if step.delta.ndim else float(step.delta)
    for name, step, _, _ in model.activation_quantizers():
        steps[name] = float(step.delta)
    return steps


def save_checkpoint(model, path, meta: dict | None = None) -> None:
    state = model.named_state()
    header = {
        "magic_version": VERSION,
        "arch": model.arch,
        "input_shape": list(model.input_shape),
        "precision": model.precision_map(),
        "steps": _step_sizes(model),
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in state],
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for _, arr in state:
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path):
    """Read a checkpoint; returns (header, {name: float64 array})."""
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}")
        raw_len = f.read(4)
        if len(raw_len) != 4:
            raise CheckpointError(f"{path}: truncated header length")
        (hlen,) = struct.unpack("<I", raw_len)
        blob = f.read(hlen)
        if len(blob) != hlen:
            raise CheckpointError(f"{path}: truncated header")
        try:
            header = json.loads(blob.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"{path}: unreadable header: {e}") from e
        if header.get("magic_version") != VERSION:
            raise CheckpointError(f"{path}: unsupported version {header.get('magic_version')}")
        tensors = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = f.read(4 * count)
            if len(raw) != 4 * count:
                raise CheckpointError(f"{path}: truncated payload for {entry['name']}")
            tensors[entry["name"]] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float64)
    return header, tensors


def load_into_model(model, path, inherit_steps: bool = False) -> dict:
    """Copy checkpoint weights (and optionally step sizes) into a model.

    The checkpoint's architecture and tensor shapes must match; the
    precision maps may differ (that is the whole point of chain
    initialization).  Returns the header.
    """
    header, tensors = load_checkpoint(path)
    if header["arch"] != model.arch:
        raise CheckpointError(
            f"{path}: checkpoint arch {header['arch']!r} does not match model arch {model.arch!r}")
    want = dict(model.named_state())
    for name, arr in want.items():
        if name not in tensors:
            raise CheckpointError(f"{path}: missing tensor {name}")
        if tuple(tensors[name].shape) != arr.shape:
            raise CheckpointError(
                f"{path}: tensor {name} has shape {tensors[name].shape}, model needs {arr.shape}")
    model.load_state(tensors)
    if inherit_steps:
        steps = header.get("steps", {})
        for name, step, _, _ in list(model.weight_quantizers()) + list(model.activation_quantizers()):
            if name in steps:
                value = np.asarray(steps[name], dtype=np.float64)
                if value.shape == step.delta.shape:
                    step.delta = np.maximum(value, 1e-8)
    return header
