"""Checkpoint directories: ``params.bin`` + ``state.json``.

``params.bin`` is a NumPy ``.npz`` archive. Keys:

* ``format``                   int64 [1], layout version
* ``g/<name>``, ``d/<name>``   generator / critic state-dict tensors
* ``opt_g/<i>/<field>``, ``opt_d/<i>/<field>``   Adam state per parameter index

``state.json`` holds the schedule position (step, images_seen, phase, alpha),
seeds and an echo of the full run configuration.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .config import RunConfig
from .model import ModelPair

FORMAT_VERSION = 1
PARAMS_NAME = "params.bin"
STATE_NAME = "state.json"


class CheckpointError(ValueError):
    pass


def _flatten_optimizer(prefix: str, opt: torch.optim.Optimizer) -> dict[str, np.ndarray]:
    out = {}
    for idx, fields in opt.state_dict()["state"].items():
        for key, value in fields.items():
            out[f"{prefix}/{idx}/{key}"] = torch.as_tensor(value).detach().cpu().numpy()
    return out


def _restore_optimizer(prefix: str, opt: torch.optim.Optimizer, arrays) -> None:
    state: dict[int, dict] = {}
    for key in arrays.files:
        if not key.startswith(prefix + "/"):
            continue
        _, idx, name = key.split("/", 2)
        state.setdefault(int(idx), {})[name] = torch.from_numpy(arrays[key].copy())
    sd = opt.state_dict()
    sd["state"] = state
    opt.load_state_dict(sd)


def save_checkpoint(directory, model: ModelPair, opt_g: Optional[torch.optim.Optimizer],
                    opt_d: Optional[torch.optim.Optimizer], state: dict, config: RunConfig) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    arrays = {"format": np.array([FORMAT_VERSION], dtype=np.int64)}
    for prefix, module in (("g", model.generator), ("d", model.discriminator)):
        for name, t in module.state_dict().items():
            arrays[f"{prefix}/{name}"] = t.detach().cpu().numpy()
    if opt_g is not None:
        arrays.update(_flatten_optimizer("opt_g", opt_g))
    if opt_d is not None:
        arrays.update(_flatten_optimizer("opt_d", opt_d))
    with open(directory / PARAMS_NAME, "wb") as fh:
        np.savez(fh, **arrays)
    payload = dict(state)
    payload.update(format_version=FORMAT_VERSION, model_seed=model.seed, config=config.to_dict())
    (directory / STATE_NAME).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return directory


def read_state(directory) -> dict:
    path = Path(directory) / STATE_NAME
    if not path.exists():
        raise CheckpointError(f"no {STATE_NAME} in {directory}")
    state = json.loads(path.read_text(encoding="utf-8"))
    if state.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format {state.get('format_version')}")
    return state


def load_checkpoint(directory, config: Optional[RunConfig] = None):
    """Rebuild the model pair from a checkpoint.

    When ``config`` is given its model section must match the stored one.
    Returns ``(model, state, stored_config)``.
    """
    directory = Path(directory)
    state = read_state(directory)
    stored = RunConfig.from_dict(state["config"])
    if config is not None and config.to_dict()["model"] != stored.to_dict()["model"]:
        raise CheckpointError(f"checkpoint {directory} was written with a different model config")
    model = ModelPair.create(stored.model, seed=state["model_seed"])
    with np.load(directory / PARAMS_NAME) as arrays:
        if int(arrays["format"][0]) != FORMAT_VERSION:
            raise CheckpointError("unsupported params.bin layout")
        for prefix, module in (("g", model.generator), ("d", model.discriminator)):
            sd = {name: torch.from_numpy(arrays[f"{prefix}/{name}"].copy()) for name in module.state_dict()}
            module.load_state_dict(sd)
    model.phase, model.alpha = int(state.get("phase", 0)), float(state.get("alpha", 1.0))
    return model, state, stored


def load_optimizer_state(directory, opt_g: torch.optim.Optimizer, opt_d: torch.optim.Optimizer) -> None:
    """Restore Adam moments saved by :func:`save_checkpoint` into fresh optimizers."""
    with np.load(Path(directory) / PARAMS_NAME) as arrays:
        _restore_optimizer("opt_g", opt_g, arrays)
        _restore_optimizer("opt_d", opt_d, arrays)
