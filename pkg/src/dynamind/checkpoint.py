"""Phase checkpoints: magic, JSON header, then named little-endian float32 blobs.

Layout (see docs/checkpoint.md)::

    b"DYNCKPT1" | uint32 header_len | header JSON (utf-8) | blob bytes

The header lists every blob as {name, shape, offset, nbytes}, offsets relative to the
start of the blob section, plus free-form metadata (phase, epoch, config echo, loss curve).
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Any

import numpy as np
import torch

from .errors import LoadError, MissingArtifactError

MAGIC = b"DYNCKPT1"
FORMAT_VERSION = 1


def save_checkpoint(path: str | Path, tensors: dict[str, torch.Tensor], meta: dict[str, Any]) -> Path:
    """Write atomically (temp file + rename) so an interrupted write never leaves a torn checkpoint."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries, blobs, offset = [], [], 0
    for name in sorted(tensors):
        value = tensors[name].detach().cpu()
        arr = np.ascontiguousarray(value.numpy(), dtype="<f4")  # promotes 0-d to 1-d, so take the shape from value
        entries.append({"name": name, "shape": list(value.shape), "offset": offset, "nbytes": arr.nbytes})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"format_version": FORMAT_VERSION, "meta": meta, "tensors": entries},
                        sort_keys=True).encode()
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str | Path) -> tuple[dict[str, torch.Tensor], dict[str, Any]]:
    path = Path(path)
    if not path.is_file():
        raise MissingArtifactError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[:8] != MAGIC:
        raise LoadError(f"{path} is not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12:12 + hlen].decode())
    if header.get("format_version") != FORMAT_VERSION:
        raise LoadError(f"{path}: unsupported checkpoint version {header.get('format_version')}")
    base = 12 + hlen
    tensors = {}
    for e in header["tensors"]:
        start = base + e["offset"]
        if start + e["nbytes"] > len(raw):
            raise LoadError(f"{path}: blob '{e['name']}' is truncated")
        arr = np.frombuffer(raw, dtype="<f4", count=e["nbytes"] // 4, offset=start).reshape(e["shape"])
        tensors[e["name"]] = torch.from_numpy(arr.copy())
    return tensors, header["meta"]


def module_tensors(prefix: str, module: torch.nn.Module) -> dict[str, torch.Tensor]:
    return {f"{prefix}/{k}": v for k, v in module.state_dict().items()}


def restore_module(prefix: str, module: torch.nn.Module, tensors: dict[str, torch.Tensor]) -> None:
    own = module.state_dict()
    state = {}
    for key, ref in own.items():
        name = f"{prefix}/{key}"
        if name not in tensors:
            raise LoadError(f"checkpoint lacks tensor '{name}'")
        state[key] = tensors[name].to(ref.dtype).reshape(ref.shape)
    module.load_state_dict(state)


def optimizer_tensors(prefix: str, opt: torch.optim.Optimizer) -> dict[str, torch.Tensor]:
    out = {}
    for idx, slot in opt.state_dict()["state"].items():
        for key, value in slot.items():
            out[f"{prefix}/{idx}/{key}"] = torch.as_tensor(value, dtype=torch.float32)
    return out


def restore_optimizer(prefix: str, opt: torch.optim.Optimizer, tensors: dict[str, torch.Tensor]) -> None:
    state_dict = opt.state_dict()
    state: dict[int, dict[str, torch.Tensor]] = {}
    head = f"{prefix}/"
    for name, value in tensors.items():
        if not name.startswith(head):
            continue
        idx, key = name[len(head):].split("/", 1)
        state.setdefault(int(idx), {})[key] = value.clone()
    state_dict["state"] = state
    opt.load_state_dict(state_dict)
