"""Checkpoint JSON files: ``{"config", "params", "epoch", "seed"}``."""

from __future__ import annotations

import json
import os

import numpy as np

from .gnn import ModelConfig, check_params


def checkpoint_dict(params, config: ModelConfig, epoch: int = 0, seed: int = 0, **extra) -> dict:
    d = {
        "config": config.to_dict(),
        "params": {k: np.asarray(v).tolist() for k, v in sorted(params.items())},
        "epoch": int(epoch),
        "seed": int(seed),
    }
    d.update(extra)
    return d


def save_checkpoint(path, params, config: ModelConfig, epoch: int = 0, seed: int = 0, **extra) -> None:
    # json writes floats with repr, so values round-trip exactly
    with open(path, "w") as fh:
        json.dump(checkpoint_dict(params, config, epoch, seed, **extra), fh)


def load_checkpoint(path):
    """Returns ``(params, config, meta)`` where meta holds epoch, seed and any extras."""
    with open(path) as fh:
        d = json.load(fh)
    config = ModelConfig.from_dict(d["config"])
    params = {k: np.array(v, dtype=np.float64) for k, v in d["params"].items()}
    check_params(params, config)
    meta = {k: v for k, v in d.items() if k not in ("config", "params")}
    return params, config, meta


def checkpoint_path(directory, epoch: int) -> str:
    return os.path.join(directory, f"ckpt_{int(epoch)}.json")


def list_checkpoints(directory) -> list[tuple[int, str]]:
    out = []
    for name in os.listdir(directory):
        if name.startswith("ckpt_") and name.endswith(".json"):
            try:
                out.append((int(name[5:-5]), os.path.join(directory, name)))
            except ValueError:
                continue
    return sorted(out)
