"""Single-file weight archives.

A checkpoint is an uncompressed ``.npz`` archive mapping dot-separated
parameter names to little-endian float32 arrays, plus a ``__config__``
entry holding a UTF-8 JSON echo of the configuration the weights were
trained under. Entries are written in sorted name order so the same
state always produces byte-identical files.

Only trainable parameters are stored; derived buffers (attention masks,
relative-position index tables) are rebuilt from the config on load.
"""

import json
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError

CONFIG_KEY = "__config__"


def module_state(module: torch.nn.Module, prefix: str = "") -> dict:
    """Named parameters of a torch module as float32 numpy arrays."""
    state = {}
    for name, param in module.named_parameters():
        state[prefix + name] = param.detach().cpu().numpy().astype("<f4")
    return state


def save_checkpoint(path, state: dict, config: dict | None = None) -> None:
    path = Path(path)
    arrays = {}
    for name in sorted(state):
        if name == CONFIG_KEY:
            raise CheckpointError(f"parameter name {CONFIG_KEY!r} is reserved")
        arr = np.asarray(state[name])
        if isinstance(state[name], torch.Tensor):
            arr = state[name].detach().cpu().numpy()
        arrays[name] = np.ascontiguousarray(arr, dtype="<f4")
    blob = json.dumps(config or {}, sort_keys=True).encode("utf-8")
    arrays[CONFIG_KEY] = np.frombuffer(blob, dtype=np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    # savez writes entries in dict order with pinned zip timestamps, so the
    # sorted insertion above makes the file a pure function of its contents
    with open(path, "wb") as f:
        np.savez(f, **arrays)


def load_checkpoint(path) -> tuple:
    """Returns (state dict of float32 arrays, config dict)."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        archive = np.load(path)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    with archive:
        config = {}
        state = {}
        for name in archive.files:
            if name == CONFIG_KEY:
                config = json.loads(bytes(archive[name]).decode("utf-8"))
            else:
                state[name] = archive[name].astype("<f4", copy=False)
    return state, config


def load_into_module(module: torch.nn.Module, state: dict, prefix: str = "") -> None:
    """Copy archive entries under `prefix` into the module's parameters.

    The archive must carry exactly the module's parameter set; the first
    shape mismatch (in module parameter order) is reported by name.
    """
    wanted = dict(module.named_parameters())
    for name, param in wanted.items():
        key = prefix + name
        if key not in state:
            raise CheckpointError(f"checkpoint is missing parameter {key!r}")
        arr = state[key]
        if tuple(arr.shape) != tuple(param.shape):
            raise CheckpointError(
                f"shape mismatch for {key!r}: checkpoint has {tuple(arr.shape)}, "
                f"model expects {tuple(param.shape)}"
            )
    extra = [
        k for k in state
        if k.startswith(prefix) and k[len(prefix):] not in wanted
    ]
    if extra:
        raise CheckpointError(f"unexpected checkpoint entries: {sorted(extra)}")
    with torch.no_grad():
        for name, param in wanted.items():
            param.copy_(torch.from_numpy(np.ascontiguousarray(state[prefix + name])))
