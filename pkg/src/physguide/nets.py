"""Small MLP helper and the manifest + flat float32 checkpoint convention."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch
from torch import nn

CHECKPOINT_VERSION = 1


def mlp(sizes: list[int], act=nn.SiLU, final_bias: bool = True) -> nn.Sequential:
    layers: list[nn.Module] = []
    for i in range(len(sizes) - 1):
        last = i == len(sizes) - 2
        layers.append(nn.Linear(sizes[i], sizes[i + 1], bias=final_bias or not last))
        if not last:
            layers.append(act())
    return nn.Sequential(*layers)


def save_checkpoint(path, module: nn.Module, meta: dict) -> None:
    """Write ``<path>.json`` (manifest) and ``<path>.bin`` (little-endian float32 weights)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = module.state_dict()
    layout = [{"name": k, "shape": list(v.shape)} for k, v in state.items()]
    flat = np.concatenate([v.detach().cpu().numpy().astype("<f4").ravel() for v in state.values()])
    manifest = {"format_version": CHECKPOINT_VERSION, "layout": layout, **meta}
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    path.with_suffix(".bin").write_bytes(flat.tobytes())


def load_checkpoint(path) -> tuple[dict, dict]:
    """Return (manifest, state_dict) from a checkpoint written by ``save_checkpoint``."""
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {manifest.get('format_version')}")
    flat = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f4")
    state, offset = {}, 0
    for item in manifest["layout"]:
        n = int(np.prod(item["shape"])) if item["shape"] else 1
        state[item["name"]] = torch.from_numpy(flat[offset:offset + n].copy()).reshape(item["shape"])
        offset += n
    if offset != flat.size:
        raise ValueError("checkpoint binary size does not match its layout")
    return manifest, state
