"""Single-file model archives: a JSON config plus named weight arrays.

Backbone weights are stored without a prefix (``block0.attn.q.weight``,
``block0.expert.vision.fc1.weight``) so that expert pruning is plain key
filtering; head weights keep their module path (``pyramid.level32.*``,
``rpn.*``, ``head.*``, ``classifier.*``).
"""

from __future__ import annotations

import json
import zipfile
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
import torch.nn as nn

from .errors import CheckpointError

CONFIG_KEY = "__config__"
FORMAT_VERSION = 1
_BACKBONE = "backbone."


def flatten_state(model: nn.Module) -> dict[str, np.ndarray]:
    out = {}
    for k, v in model.state_dict().items():
        name = k[len(_BACKBONE):] if k.startswith(_BACKBONE) else k
        out[name] = v.detach().cpu().numpy()
    return out


def unflatten_state(model: nn.Module, arrays: Mapping[str, np.ndarray]) -> dict[str, torch.Tensor]:
    heads = {name for name, _ in model.named_children()} - {"backbone"}
    out = {}
    for k, v in arrays.items():
        key = k if k.split(".", 1)[0] in heads else _BACKBONE + k
        out[key] = torch.from_numpy(np.array(v))
    return out


def save_checkpoint(path, model: nn.Module, config: Mapping) -> None:
    """Write ``model`` and its JSON-serializable ``config`` to ``path`` atomically."""
    path = Path(path)
    arrays = flatten_state(model)
    if CONFIG_KEY in arrays:
        raise CheckpointError(f"weight name {CONFIG_KEY!r} is reserved")
    meta = dict(config)
    meta["format"] = FORMAT_VERSION
    blob = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        np.savez(f, **{CONFIG_KEY: blob}, **arrays)
    tmp.replace(path)


def read_archive(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as z:
            arrays = {k: z[k] for k in z.files}
    except (OSError, ValueError, zipfile.BadZipFile) as e:
        raise CheckpointError(f"unreadable checkpoint {path}: {e}") from None
    if CONFIG_KEY not in arrays:
        raise CheckpointError(f"{path} has no embedded config")
    meta = json.loads(arrays.pop(CONFIG_KEY).tobytes().decode())
    if meta.get("format") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint format {meta.get('format')!r}")
    return meta, arrays


def load_weights(model: nn.Module, arrays: Mapping[str, np.ndarray], path="<memory>") -> nn.Module:
    state = unflatten_state(model, arrays)
    want = set(model.state_dict())
    have = set(state)
    if want != have:
        missing = sorted(want - have)[:5]
        extra = sorted(have - want)[:5]
        raise CheckpointError(f"{path}: weights do not match the model (missing {missing}, unexpected {extra})")
    for k, v in model.state_dict().items():
        if tuple(v.shape) != tuple(state[k].shape):
            raise CheckpointError(f"{path}: shape mismatch for {k}: {tuple(state[k].shape)} vs {tuple(v.shape)}")
    model.load_state_dict(state)
    return model


__all__ = ["save_checkpoint", "read_archive", "load_weights", "flatten_state", "unflatten_state", "CONFIG_KEY"]
