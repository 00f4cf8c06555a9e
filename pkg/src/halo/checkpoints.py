"""Deterministic checkpoint container.

A checkpoint is a JSON header (kind, config hash, array directory) followed
by raw little-endian array bytes in sorted name order. The format carries no
timestamps or environment data, so identical parameters always serialize to
identical bytes; end-to-end determinism tests rely on this.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"HALOCKPT"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    """Malformed checkpoint bytes or a kind/architecture mismatch."""


def canonical_config_text(config: dict) -> str:
    return json.dumps(config, sort_keys=True, separators=(",", ":"))


def config_hash(config: dict) -> str:
    return hashlib.sha256(canonical_config_text(config).encode()).hexdigest()


@dataclass
class Checkpoint:
    kind: str
    config: dict
    arrays: dict

    @property
    def hash(self) -> str:
        return config_hash(self.config)


def _le_dtype(arr: np.ndarray) -> str:
    dt = arr.dtype.newbyteorder("<")
    return dt.str


def save_checkpoint(path, kind: str, arrays: dict, config: dict) -> None:
    """Atomically write arrays + config; same inputs give same bytes."""
    entries = []
    blobs = []
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        # ascontiguousarray promotes 0-d to 1-d; reshape restores the rank
        arr = np.ascontiguousarray(arr).reshape(arr.shape)
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        entries.append({"name": name, "dtype": _le_dtype(arr), "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
    header = json.dumps(
        {
            "format_version": FORMAT_VERSION,
            "kind": kind,
            "config": config,
            "config_hash": config_hash(config),
            "arrays": entries,
        },
        sort_keys=True,
        separators=(",", ":"),
    ).encode()

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(len(header).to_bytes(8, "little"))
        f.write(header)
        for blob in blobs:
            f.write(blob)
    tmp.replace(path)


def load_checkpoint(path, expect_kind: str | None = None) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    off = len(MAGIC)
    hlen = int.from_bytes(data[off : off + 8], "little")
    off += 8
    try:
        header = json.loads(data[off : off + hlen])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: bad header ({exc})") from exc
    off += hlen
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {header.get('format_version')}")
    if expect_kind is not None and header["kind"] != expect_kind:
        raise CheckpointError(f"{path}: kind {header['kind']!r}, expected {expect_kind!r}")
    arrays = {}
    for entry in header["arrays"]:
        dt = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        nbytes = dt.itemsize * count
        arrays[entry["name"]] = np.frombuffer(
            data[off : off + nbytes], dtype=dt
        ).reshape(entry["shape"]).copy()
        off += nbytes
    if off != len(data):
        raise CheckpointError(f"{path}: trailing bytes")
    return Checkpoint(kind=header["kind"], config=header["config"], arrays=arrays)


def state_dict_arrays(module) -> dict:
    """Torch state dict as plain numpy arrays (values detached and copied)."""
    return {k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def load_state_dict_arrays(module, arrays: dict) -> None:
    """Inverse of :func:`state_dict_arrays`; shapes must match exactly."""
    import torch

    state = module.state_dict()
    if set(state) != set(arrays):
        missing = set(state) ^ set(arrays)
        raise CheckpointError(f"architecture mismatch: differing keys {sorted(missing)}")
    for k, v in state.items():
        if tuple(arrays[k].shape) != tuple(v.shape):
            raise CheckpointError(
                f"architecture mismatch: {k} has shape {tuple(arrays[k].shape)}, "
                f"model expects {tuple(v.shape)}"
            )
    module.load_state_dict(
        {k: torch.as_tensor(arrays[k]).to(v.dtype) for k, v in state.items()}
    )
