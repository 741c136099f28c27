"""Self-describing checkpoint archives.

A checkpoint is an npz file mapping parameter names to shaped numeric arrays
plus a ``__meta__`` JSON record (step count, config echo, RNG states,
optimizer bookkeeping). Nothing is pickled, so archives stay portable.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .errors import ContractError

_META_KEY = "__meta__"
FORMAT_NAME = "canvasinfill-checkpoint"
FORMAT_VERSION = 1


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = dict(meta)
    meta.setdefault("format", FORMAT_NAME)
    meta.setdefault("version", FORMAT_VERSION)
    payload = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
    np.savez_compressed(path, **{_META_KEY: payload}, **arrays)
    return path


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise ContractError(f"checkpoint not found: {path}")
    with np.load(path) as data:
        if _META_KEY not in data:
            raise ContractError(f"{path} is not a canvasinfill checkpoint (no metadata)")
        meta = json.loads(bytes(data[_META_KEY].tobytes()).decode("utf-8"))
        arrays = {k: data[k] for k in data.files if k != _META_KEY}
    if meta.get("format") != FORMAT_NAME:
        raise ContractError(f"{path} has unknown checkpoint format {meta.get('format')!r}")
    return arrays, meta


def module_arrays(module: torch.nn.Module, prefix: str) -> dict[str, np.ndarray]:
    """Flatten a module state dict into prefixed numpy arrays."""
    return {
        f"{prefix}/{name}": tensor.detach().cpu().numpy()
        for name, tensor in module.state_dict().items()
    }


def load_module_arrays(
    module: torch.nn.Module, arrays: dict[str, np.ndarray], prefix: str
) -> None:
    want = f"{prefix}/"
    state = {
        key[len(want) :]: torch.from_numpy(np.array(arr))
        for key, arr in arrays.items()
        if key.startswith(want)
    }
    if not state:
        raise ContractError(f"checkpoint holds no arrays under {prefix!r}")
    module.load_state_dict(state)


def optimizer_arrays(
    optimizer: torch.optim.Optimizer, prefix: str
) -> tuple[dict[str, np.ndarray], dict]:
    """Serialize optimizer state tensors as arrays; scalars go into metadata."""
    sd = optimizer.state_dict()
    arrays: dict[str, np.ndarray] = {}
    scalars: dict[str, dict] = {}
    for pid, entries in sd["state"].items():
        for key, value in entries.items():
            if isinstance(value, torch.Tensor):
                arrays[f"{prefix}/state/{pid}/{key}"] = value.detach().cpu().numpy()
            else:
                scalars.setdefault(str(pid), {})[key] = value
    meta = {"param_groups": sd["param_groups"], "scalars": scalars}
    return arrays, meta


def load_optimizer_arrays(
    optimizer: torch.optim.Optimizer,
    arrays: dict[str, np.ndarray],
    meta: dict,
    prefix: str,
) -> None:
    want = f"{prefix}/state/"
    state: dict[int, dict] = {}
    for key, arr in arrays.items():
        if not key.startswith(want):
            continue
        pid_str, entry = key[len(want) :].split("/", 1)
        state.setdefault(int(pid_str), {})[entry] = torch.from_numpy(np.array(arr))
    for pid_str, entries in meta.get("scalars", {}).items():
        state.setdefault(int(pid_str), {}).update(entries)
    optimizer.load_state_dict({"state": state, "param_groups": meta["param_groups"]})


def rng_meta(rng: np.random.Generator) -> dict:
    """JSON-able snapshot of a numpy Generator's bit-generator state."""
    return rng.bit_generator.state


def rng_from_meta(meta: dict) -> np.random.Generator:
    gen = np.random.default_rng()
    if meta["bit_generator"] != type(gen.bit_generator).__name__:
        gen = np.random.Generator(getattr(np.random, meta["bit_generator"])())
    gen.bit_generator.state = meta
    return gen
