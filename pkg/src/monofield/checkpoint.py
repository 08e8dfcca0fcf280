"""Checkpoint container.

A checkpoint is a single safetensors file.  Tensors are stored as
``<namespace>.<parameter name>`` (namespaces: ``encoder``, ``field``,
``disc_color``, ``disc_alpha``); the header metadata holds a ``configs`` entry
with the JSON-encoded configuration of every stored network plus any
caller-supplied string entries.
"""

from __future__ import annotations

import dataclasses
import json

import torch
from safetensors.torch import load_file, safe_open, save_file


def _jsonable(cfg):
    if dataclasses.is_dataclass(cfg):
        return dataclasses.asdict(cfg)
    return cfg


def save_checkpoint(path, modules: dict[str, torch.nn.Module], configs: dict | None = None, **meta: str):
    tensors = {}
    for ns, module in modules.items():
        if "." in ns:
            raise ValueError(f"namespace {ns!r} may not contain '.'")
        for name, value in module.state_dict().items():
            tensors[f"{ns}.{name}"] = value.detach().contiguous().clone()
    metadata = {"configs": json.dumps({k: _jsonable(v) for k, v in (configs or {}).items()}, sort_keys=True)}
    metadata.update({k: str(v) for k, v in meta.items()})
    save_file(tensors, str(path), metadata=metadata)


def read_checkpoint(path) -> tuple[dict[str, dict[str, torch.Tensor]], dict, dict]:
    """Return ``(state dicts by namespace, configs, other metadata)``."""
    flat = load_file(str(path))
    with safe_open(str(path), framework="pt") as f:
        metadata = dict(f.metadata() or {})
    states: dict[str, dict[str, torch.Tensor]] = {}
    for key, value in flat.items():
        ns, name = key.split(".", 1)
        states.setdefault(ns, {})[name] = value
    configs = json.loads(metadata.pop("configs", "{}"))
    return states, configs, metadata


def load_into(path, modules: dict[str, torch.nn.Module]) -> dict:
    """Load matching namespaces into ``modules`` (strict per module); returns the stored configs."""
    states, configs, _ = read_checkpoint(path)
    for ns, module in modules.items():
        if ns not in states:
            raise KeyError(f"checkpoint {path} has no namespace {ns!r} (found {sorted(states)})")
        module.load_state_dict(states[ns])
    return configs
