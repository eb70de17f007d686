"""Checkpoint files: a single .npz holding every parameter, its momentum
buffer, and a JSON metadata blob (resolved config, config hash, epoch,
RNG state, loss trace, final metrics)."""

from __future__ import annotations

import hashlib
import json

import numpy as np

from .diffcore import Parameter
from .errors import ConfigError

CHECKPOINT_FORMAT = "conseq-checkpoint"
CHECKPOINT_VERSION = 1


def config_hash(config: dict) -> str:
    """Stable short hash of a resolved configuration dict."""
    blob = json.dumps(config, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def save_checkpoint(path, params: list[Parameter], meta: dict):
    meta = dict(meta)
    meta["format"] = CHECKPOINT_FORMAT
    meta["version"] = CHECKPOINT_VERSION
    arrays = {}
    for p in params:
        arrays[f"param::{p.name}"] = p.data
        arrays[f"momentum::{p.name}"] = p.momentum
    arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    np.savez(path, **arrays)


def load_checkpoint(path) -> tuple[dict, dict, dict]:
    """Returns (param arrays by name, momentum arrays by name, meta dict)."""
    with np.load(path) as bundle:
        meta = json.loads(bytes(bundle["__meta__"]).decode())
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ConfigError(f"not a checkpoint file: {path}")
        params, momenta = {}, {}
        for key in bundle.files:
            if key.startswith("param::"):
                params[key[len("param::"):]] = bundle[key]
            elif key.startswith("momentum::"):
                momenta[key[len("momentum::"):]] = bundle[key]
    return params, momenta, meta
