"""Self-describing checkpoint container.

Layout: an 8-byte magic, an 8-byte little-endian header length, a UTF-8
JSON header (format version, completed stage, per-tensor name/shape/dtype/
offset table, config snapshot, RNG state), then the raw little-endian
tensor payloads.  The format is deliberately free of any serialization
framework so checkpoints stay portable across languages.
"""

from __future__ import annotations

import dataclasses
import json
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig
from .networks import DsrModel

MAGIC = b"DSRCKPT\x00"
FORMAT_VERSION = 1

_DTYPES = {"float32": "<f4", "int64": "<i8", "uint8": "|u1"}


class CheckpointError(RuntimeError):
    """Raised for unreadable, truncated, or incompatible checkpoint files."""


@dataclass
class Checkpoint:
    format_version: int
    stage_completed: int
    stage_flags: dict[str, str]
    config: RunConfig
    tensors: dict[str, np.ndarray]
    rng: dict


def _tensor_payload(name: str, array: np.ndarray, offset: int, entries: list, chunks: list) -> int:
    dtype_name = str(array.dtype)
    if dtype_name not in _DTYPES:
        raise CheckpointError(f"unsupported tensor dtype {dtype_name} for {name}")
    raw = np.ascontiguousarray(array).astype(_DTYPES[dtype_name]).tobytes()
    entries.append(
        {
            "name": name,
            "dtype": dtype_name,
            "shape": list(array.shape),
            "offset": offset,
            "nbytes": len(raw),
        }
    )
    chunks.append(raw)
    return offset + len(raw)


def _rng_payload(rng) -> dict:
    state = {}
    if rng is not None:
        state["numpy"] = _jsonify(rng.bit_generator.state)
    state["torch"] = torch.get_rng_state().numpy().astype(np.uint8).tolist()
    return state


def _jsonify(value):
    if isinstance(value, dict):
        return {k: _jsonify(v) for k, v in value.items()}
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    return value


def save_checkpoint(
    model: DsrModel,
    path: str | Path,
    config: RunConfig,
    rng: np.random.Generator | None = None,
) -> Path:
    """Write the model, config snapshot, and RNG state atomically.

    The write goes to a temporary file in the target directory followed by
    a rename, so a crashed save never leaves a partial checkpoint behind.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    entries: list[dict] = []
    chunks: list[bytes] = []
    offset = 0
    for name, tensor in model.state_dict().items():
        offset = _tensor_payload(name, tensor.detach().cpu().numpy(), offset, entries, chunks)

    header = {
        "format_version": FORMAT_VERSION,
        "stage_completed": model.stage_completed,
        "stage_flags": model.stage_flags,
        "config": config.to_dict(),
        "rng": _rng_payload(rng),
        "tensors": entries,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")

    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<Q", len(header_bytes)))
            fh.write(header_bytes)
            for chunk in chunks:
                fh.write(chunk)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    """Parse a checkpoint container, validating magic, version, and length."""
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < len(MAGIC) + 8 or blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file (bad magic)")
    (header_len,) = struct.unpack_from("<Q", blob, len(MAGIC))
    header_start = len(MAGIC) + 8
    if len(blob) < header_start + header_len:
        raise CheckpointError(f"{path} is truncated (header incomplete)")
    try:
        header = json.loads(blob[header_start : header_start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path} has a corrupt header: {exc}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path} has format version {header.get('format_version')}, expected {FORMAT_VERSION}"
        )

    payload_start = header_start + header_len
    tensors: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        begin = payload_start + entry["offset"]
        end = begin + entry["nbytes"]
        if end > len(blob):
            raise CheckpointError(f"{path} is truncated (tensor {entry['name']} incomplete)")
        arr = np.frombuffer(blob[begin:end], dtype=_DTYPES[entry["dtype"]])
        tensors[entry["name"]] = arr.reshape(entry["shape"]).astype(entry["dtype"])

    config = RunConfig.from_dict(header["config"])
    return Checkpoint(
        format_version=header["format_version"],
        stage_completed=header["stage_completed"],
        stage_flags=header["stage_flags"],
        config=config,
        tensors=tensors,
        rng=header.get("rng", {}),
    )


def load_model(path: str | Path) -> tuple[DsrModel, Checkpoint]:
    """Rebuild the model from a checkpoint, restoring freezing flags."""
    checkpoint = load_checkpoint(path)
    model = DsrModel(checkpoint.config.model)
    state = {name: torch.from_numpy(arr.copy()) for name, arr in checkpoint.tensors.items()}
    model.load_state_dict(state)
    model.stage_completed = checkpoint.stage_completed
    for name, flag in checkpoint.stage_flags.items():
        for p in model.component(name).parameters():
            p.requires_grad_(flag == "trainable")
    return model, checkpoint


def restore_rng(checkpoint: Checkpoint) -> np.random.Generator | None:
    """Recreate the generators saved with a checkpoint (torch state is global)."""
    state = checkpoint.rng or {}
    if "torch" in state:
        torch.set_rng_state(torch.tensor(state["torch"], dtype=torch.uint8))
    if "numpy" in state:
        rng = np.random.default_rng()
        rng.bit_generator.state = state["numpy"]
        return rng
    return None
