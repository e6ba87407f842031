"""Checkpoints: a flat ``.npz`` of parameter-path -> array plus a JSON header
entry (``__header__``) holding the model name, ModelConfig and format version."""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np
import torch

from ..core import ModelConfig, build_model

CHECKPOINT_VERSION = 1
HEADER_KEY = "__header__"


def save_checkpoint(model, path, extra: dict | None = None) -> Path:
    """Atomically write ``model`` (write to a temp file, then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "model": model.registry_name,
        "config": model.config.to_dict(),
        "extra": extra or {},
    }
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    arrays[HEADER_KEY] = np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as f:
            np.savez(f, **arrays)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except OSError as exc:
        tmp.unlink(missing_ok=True)
        raise OSError(f"could not write checkpoint {path}: {exc}") from exc
    return path


def read_header(path) -> dict:
    with np.load(path) as z:
        return json.loads(z[HEADER_KEY].tobytes().decode())


def load_checkpoint(path, map_location="cpu"):
    """Rebuild the model recorded in the header and load its weights."""
    with np.load(path) as z:
        header = json.loads(z[HEADER_KEY].tobytes().decode())
        if header.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {header.get('format_version')}")
        state = {k: torch.from_numpy(z[k].copy()) for k in z.files if k != HEADER_KEY}
    model = build_model(header["model"], ModelConfig.from_dict(header["config"]))
    model.load_state_dict(state)
    model.to(map_location)
    model.checkpoint_header = header
    return model
