"""Checkpoint archive: JSON manifest + raw little-endian tensor buffers in a zip.

The manifest records schema version, a config snapshot, the epoch, and a named
tensor index (name, shape, dtype, file). Parameters are float32 buffers;
integer buffers (e.g. batch-norm step counters) carry their own dtype tag.
"""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np
import torch
from torch import nn

CHECKPOINT_SCHEMA_VERSION = 1

_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8", "int32": "<i4"}

_EPOCH_TS = (1980, 1, 1, 0, 0, 0)  # fixed zip timestamps keep archives byte-stable


def zip_write(zf: zipfile.ZipFile, name: str, payload: bytes | str) -> None:
    zf.writestr(zipfile.ZipInfo(name, date_time=_EPOCH_TS), payload)


def save_tensors(path: Path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    index = []
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for i, (name, arr) in enumerate(sorted(tensors.items())):
            arr = np.asarray(arr)
            dtype = str(arr.dtype)
            if dtype not in _DTYPES:
                raise ValueError(f"unsupported tensor dtype {dtype} for {name}")
            fname = f"tensors/{i:05d}.bin"
            zip_write(zf, fname, arr.astype(_DTYPES[dtype]).tobytes())
            index.append(
                {"name": name, "shape": list(arr.shape), "dtype": dtype, "file": fname}
            )
        manifest = {
            "schema_version": CHECKPOINT_SCHEMA_VERSION,
            "meta": meta or {},
            "tensors": index,
        }
        zip_write(zf, "manifest.json", json.dumps(manifest, indent=2))
    return path


def load_tensors(path: Path) -> tuple[dict[str, np.ndarray], dict]:
    with zipfile.ZipFile(Path(path), "r") as zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest["schema_version"] != CHECKPOINT_SCHEMA_VERSION:
            raise ValueError(
                f"unsupported checkpoint schema {manifest['schema_version']}"
            )
        tensors = {}
        for entry in manifest["tensors"]:
            buf = zf.read(entry["file"])
            arr = np.frombuffer(buf, dtype=_DTYPES[entry["dtype"]]).reshape(entry["shape"])
            tensors[entry["name"]] = arr.astype(entry["dtype"]).copy()
    return tensors, manifest["meta"]


def module_tensors(module: nn.Module, prefix: str) -> dict[str, np.ndarray]:
    out = {}
    for name, t in module.state_dict().items():
        out[f"{prefix}/{name}"] = t.detach().cpu().numpy()
    return out


def load_module(module: nn.Module, tensors: dict[str, np.ndarray], prefix: str) -> None:
    state = {}
    for name, t in module.state_dict().items():
        key = f"{prefix}/{name}"
        if key not in tensors:
            raise KeyError(f"checkpoint is missing tensor {key}")
        state[name] = torch.as_tensor(tensors[key]).to(t.dtype)
    module.load_state_dict(state)


def optimizer_tensors(optimizer: torch.optim.Optimizer) -> tuple[dict[str, np.ndarray], dict]:
    """Flatten Adam-style optimizer state into named buffers + step metadata."""
    tensors: dict[str, np.ndarray] = {}
    steps: dict[str, float] = {}
    idx = 0
    for group in optimizer.param_groups:
        for p in group["params"]:
            state = optimizer.state.get(p, {})
            for key, val in state.items():
                if torch.is_tensor(val) and val.ndim > 0:
                    tensors[f"optim/{idx:05d}/{key}"] = val.detach().cpu().numpy()
                else:
                    steps[f"{idx:05d}/{key}"] = float(val)
            idx += 1
    return tensors, steps


def load_optimizer(
    optimizer: torch.optim.Optimizer, tensors: dict[str, np.ndarray], steps: dict
) -> None:
    idx = 0
    for group in optimizer.param_groups:
        for p in group["params"]:
            state = {}
            prefix = f"optim/{idx:05d}/"
            for name, arr in tensors.items():
                if name.startswith(prefix):
                    state[name[len(prefix):]] = torch.as_tensor(arr).to(p.dtype)
            for key, val in steps.items():
                k_idx, k_name = key.split("/", 1)
                if int(k_idx) == idx:
                    state[k_name] = torch.tensor(val)
            if state:
                optimizer.state[p] = state
            idx += 1
