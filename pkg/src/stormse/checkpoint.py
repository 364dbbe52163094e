"""Binary checkpoint container.

Layout (little-endian)::

    b"STRMCKPT"            8-byte magic
    uint32 version
    uint32 header_len
    header                 UTF-8 JSON: role, arch, configs, step, section table
    sections               raw arrays in section-table order

Sections hold the flat parameter vector, the EMA shadow vector and the Adam
moment vectors.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"STRMCKPT"
VERSION = 1
ROLES = ("score-regen", "score-refine", "predictor")

_DTYPES = {"f4": "<f4", "f8": "<f8"}


class CheckpointError(ValueError):
    pass


def _flat(tensors) -> np.ndarray:
    return torch.cat([t.detach().reshape(-1).cpu() for t in tensors]).numpy()


def adam_state_vectors(optimizer: torch.optim.Optimizer, params):
    """Flatten Adam moments in parameter order; returns (exp_avg, exp_avg_sq, step)."""
    avg, sq, step = [], [], 0
    for p in params:
        st = optimizer.state.get(p, {})
        if "exp_avg" in st:
            avg.append(st["exp_avg"])
            sq.append(st["exp_avg_sq"])
            step = int(st["step"])
        else:
            avg.append(torch.zeros_like(p))
            sq.append(torch.zeros_like(p))
    return _flat(avg), _flat(sq), step


def load_adam_state(optimizer: torch.optim.Optimizer, params, exp_avg, exp_avg_sq, step: int) -> None:
    if step == 0:
        return
    offset = 0
    for p in params:
        n = p.numel()
        optimizer.state[p] = {
            "step": torch.tensor(float(step)),
            "exp_avg": torch.as_tensor(exp_avg[offset : offset + n].copy(), dtype=p.dtype).view_as(p).clone(),
            "exp_avg_sq": torch.as_tensor(exp_avg_sq[offset : offset + n].copy(), dtype=p.dtype).view_as(p).clone(),
        }
        offset += n


def save_checkpoint(path, *, role: str, arch: dict, params: np.ndarray, ema: np.ndarray | None = None,
                    adam: tuple | None = None, meta: dict | None = None) -> None:
    if role not in ROLES:
        raise CheckpointError(f"unknown role {role!r}")
    sections = {"params": params}
    if ema is not None:
        sections["ema"] = ema
    adam_step = 0
    if adam is not None:
        sections["adam_exp_avg"], sections["adam_exp_avg_sq"], adam_step = adam
    table = []
    blobs = []
    for name, arr in sections.items():
        code = "f8" if arr.dtype == np.float64 else "f4"
        data = np.ascontiguousarray(arr, dtype=_DTYPES[code])
        table.append({"name": name, "dtype": code, "count": int(data.size)})
        blobs.append(data.tobytes())
    header = {"role": role, "arch": arch, "adam_step": adam_step, "sections": table, "meta": meta or {}}
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(raw)))
        f.write(raw)
        for blob in blobs:
            f.write(blob)
    tmp.replace(path)


def read_checkpoint(path) -> tuple[dict, dict]:
    """Return ``(header, sections)`` where sections map names to numpy arrays."""
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, header_len = struct.unpack("<II", data[8:16])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[16 : 16 + header_len].decode("utf-8"))
    offset = 16 + header_len
    sections = {}
    for entry in header["sections"]:
        dtype = np.dtype(_DTYPES[entry["dtype"]])
        nbytes = entry["count"] * dtype.itemsize
        if offset + nbytes > len(data):
            raise CheckpointError(f"{path}: truncated section {entry['name']!r} (missing bytes)")
        sections[entry["name"]] = np.frombuffer(data[offset : offset + nbytes], dtype=dtype)
        offset += nbytes
    if offset != len(data):
        raise CheckpointError(f"{path}: trailing or missing bytes")
    return header, sections
