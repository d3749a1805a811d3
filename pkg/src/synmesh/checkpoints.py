"""Checkpoint files: named tensors plus a manifest with per-tensor freeze flags.

A checkpoint holds a flat ``name -> tensor`` map (module prefixes joined with
'.'), the training step, a config snapshot, and an RNG descriptor.  The manifest
lists every tensor's shape/dtype and whether it was frozen (``requires_grad``
False for parameters; buffers always count as frozen) when saved, so loaders can
verify freeze contracts without instantiating modules.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch
from torch import nn

from .container import MAGIC_CHECKPOINT, read_container, write_container
from .errors import ShapeError


def _named_tensors(modules: dict[str, nn.Module]):
    for prefix, module in modules.items():
        for name, param in module.named_parameters():
            yield f"{prefix}.{name}", param.detach(), not param.requires_grad
        for name, buf in module.named_buffers():
            yield f"{prefix}.{name}", buf.detach(), True


def save_checkpoint(path, modules: dict[str, nn.Module], step: int,
                    config_echo: dict, rng_state: dict | None = None,
                    extra_tensors: dict | None = None) -> None:
    manifest = []
    tensors = {}
    for name, tensor, frozen in _named_tensors(modules):
        arr = tensor.cpu().numpy()
        tensors[name] = arr
        manifest.append({"name": name, "shape": list(arr.shape),
                         "dtype": str(arr.dtype), "frozen": bool(frozen)})
    for name, value in (extra_tensors or {}).items():
        arr = value.detach().cpu().numpy() if torch.is_tensor(value) else np.asarray(value)
        tensors[name] = arr
        manifest.append({"name": name, "shape": list(arr.shape),
                         "dtype": str(arr.dtype), "frozen": False})
    head = {"manifest": {"tensors": manifest, "step": int(step),
                         "config": config_echo, "rng_state": rng_state or {}}}
    write_container(path, MAGIC_CHECKPOINT, [head, tensors])


def load_checkpoint(path) -> tuple[dict, dict]:
    """Returns (manifest dict, name -> ndarray tensor map)."""
    records = read_container(path, MAGIC_CHECKPOINT)
    if len(records) != 2 or "manifest" not in records[0]:
        raise ShapeError(f"checkpoint {path} malformed: expected manifest + tensor records")
    return records[0]["manifest"], records[1]


def restore_modules(modules: dict[str, nn.Module], tensors: dict) -> None:
    """Copy checkpoint tensors into live modules (strict on presence and shape)."""
    for prefix, module in modules.items():
        state = {}
        plen = len(prefix) + 1
        for name, arr in tensors.items():
            if name.startswith(prefix + "."):
                state[name[plen:]] = torch.from_numpy(np.ascontiguousarray(arr))
        missing, unexpected = module.load_state_dict(state, strict=False)
        if missing:
            raise ShapeError(f"checkpoint missing tensors for {prefix}: {missing[:4]}")


def checksum_module(module: nn.Module) -> str:
    """Order-stable SHA-256 over all parameters and buffers of a module."""
    digest = hashlib.sha256()
    items = sorted(
        list(module.named_parameters()) + list(module.named_buffers()),
        key=lambda kv: kv[0])
    for name, tensor in items:
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().numpy().tobytes())
    return digest.hexdigest()
