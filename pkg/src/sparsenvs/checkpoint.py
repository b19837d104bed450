"""Self-describing ``.npz`` checkpoints: a JSON header plus named weight arrays."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

FORMAT = "sparsenvs.checkpoint"
VERSION = 1
_HEADER = "__header__"


@dataclass
class Checkpoint:
    module: str
    config: dict
    weights: dict[str, np.ndarray]
    step: int = 0
    extra: dict | None = None
    version: int = VERSION


class CheckpointError(RuntimeError):
    pass


def state_arrays(model: nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}


def save_checkpoint(path: str | Path, module: str, model: nn.Module, config: dict, step: int = 0, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"format": FORMAT, "version": VERSION, "module": module, "config": config, "step": step, "extra": extra or {}}
    arrays = state_arrays(model)
    if _HEADER in arrays:
        raise CheckpointError(f"weight name {_HEADER!r} is reserved")
    tmp = path.with_suffix(".tmp.npz")
    with open(tmp, "wb") as fh:
        np.savez(fh, **{_HEADER: np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)}, **arrays)
    tmp.replace(path)
    return path


def read_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} not found")
    with np.load(path, allow_pickle=False) as data:
        if _HEADER not in data:
            raise CheckpointError(f"{path} has no checkpoint header")
        header = json.loads(bytes(data[_HEADER]).decode())
        weights = {k: data[k] for k in data.files if k != _HEADER}
    if header.get("format") != FORMAT:
        raise CheckpointError(f"{path} is not a {FORMAT} file")
    if header["version"] > VERSION:
        raise CheckpointError(f"{path} has version {header['version']}, newer than supported {VERSION}")
    return Checkpoint(header["module"], header["config"], weights, header["step"], header.get("extra"), header["version"])


def load_weights(model: nn.Module, ckpt: Checkpoint, module: str | None = None) -> nn.Module:
    if module is not None and ckpt.module != module:
        raise CheckpointError(f"expected a {module} checkpoint, got {ckpt.module}")
    state = {k: torch.from_numpy(np.array(v)) for k, v in ckpt.weights.items()}
    model.load_state_dict(state, strict=True)
    return model
