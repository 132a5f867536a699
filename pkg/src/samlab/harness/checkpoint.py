"""JSON checkpoints with a SHA-256 checksum over the canonical payload.

Floats are written with ``repr`` (shortest round-trip form), so a
save -> load -> save cycle reproduces the file byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np

from ..nn import ModelSpec, NormState, build_model
from ..optim import make_optimizer
from ..rng import rng_from_state, rng_state

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model: object
    optimizer: object
    rng: object
    epoch: int
    step: int
    run_config: dict


def _canonical(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def _view_dict(v):
    return {"param_id": v.param_id, "offset": v.offset, "length": v.length,
            "shape": list(v.shape), "tag": v.tag, "layer_id": v.layer_id,
            "layer_group_id": v.layer_group_id}


def checkpoint_save(path, model, optimizer, rng, epoch=0, step=0, run_config=None):
    payload = {
        "format_version": FORMAT_VERSION,
        "model_spec": model.spec.to_dict(),
        "param_views": [_view_dict(v) for v in model.registry],
        "flat_params": [float(x) for x in model.params],
        "norm_states": model.norm_state_dicts(),
        "optimizer_state": optimizer.state_dict() if optimizer is not None else None,
        "rng_state": rng_state(rng) if rng is not None else None,
        "epoch": int(epoch),
        "step": int(step),
        "run_config": run_config,
    }
    body = _canonical(payload)
    digest = hashlib.sha256(body.encode()).hexdigest()
    doc = '{"checksum":"%s","payload":%s}\n' % (digest, body)
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write(doc)
    os.replace(tmp, path)
    return path


def checkpoint_load(path, base_config=None):
    """Rebuild model, optimizer and RNG; nothing is returned unless the checksum matches.

    ``base_config`` (an ``SGDConfig``/``AdamWConfig``) is needed to rebuild the
    optimizer; without it the stored run config is used when present.
    """
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if not isinstance(doc, dict) or set(doc) != {"checksum", "payload"}:
        raise CheckpointError(f"{path}: not a checkpoint document")
    payload = doc["payload"]
    digest = hashlib.sha256(_canonical(payload).encode()).hexdigest()
    if digest != doc["checksum"]:
        raise CheckpointError(f"{path}: checksum mismatch")
    if payload.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format_version {payload.get('format_version')} != {FORMAT_VERSION}")

    spec = ModelSpec(**payload["model_spec"])
    model = build_model(spec, seed=0)
    stored = payload["param_views"]
    if stored != [_view_dict(v) for v in model.registry]:
        raise CheckpointError(f"{path}: parameter registry does not match the model spec")
    params = np.array(payload["flat_params"], dtype=np.float64)
    if params.shape != model.params.shape:
        raise CheckpointError(f"{path}: {params.size} params, model needs {model.num_params}")
    model.params = params
    model.norm_states = [NormState.from_dict(s) for s in payload["norm_states"]]

    optimizer = None
    opt_state = payload["optimizer_state"]
    if opt_state is not None:
        if base_config is None and payload.get("run_config"):
            from .config import parse_config
            base_config = parse_config(payload["run_config"]).optim.base
        if base_config is not None:
            optimizer = make_optimizer(base_config, model.num_params)
            optimizer.load_state_dict(opt_state)
    rng = rng_from_state(payload["rng_state"]) if payload["rng_state"] else None
    return Checkpoint(model, optimizer, rng, payload["epoch"], payload["step"],
                      payload.get("run_config"))
