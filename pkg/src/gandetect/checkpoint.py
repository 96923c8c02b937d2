"""Checkpoint archive format shared by every trained network.

A checkpoint is a single zip archive containing ``manifest.json`` plus one
raw little-endian float32 blob per tensor. The manifest records tensor
names, shapes, dtypes and blob paths together with free-form metadata
(config echo, iteration counter, batch-norm statistics and optimizer
state are stored as ordinary named tensors).

Archives are written deterministically: fixed entry timestamps, stored
(uncompressed) blobs, sorted tensor names and canonical JSON. Two saves
of identical content are byte-identical files.
"""

from __future__ import annotations

import json
import zipfile
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
from torch import nn

from .errors import DataError

# Fixed timestamp so archive bytes depend only on content.
_ZIP_DATE = (1980, 1, 1, 0, 0, 0)

FORMAT_NAME = "gandetect-checkpoint"
FORMAT_VERSION = 1


class CheckpointError(DataError):
    """Raised for unreadable, truncated or inconsistent archives."""


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    meta: dict


def save_checkpoint(path: str | Path, tensors: Mapping[str, np.ndarray], meta: dict) -> None:
    """Write tensors and metadata to ``path`` as a deterministic archive."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = sorted(tensors)
    entries = {}
    blobs = []
    for i, name in enumerate(names):
        # np.asarray keeps 0-dim scalars 0-dim; tobytes() emits C order.
        arr = np.asarray(tensors[name], dtype=np.float32)
        blob_name = f"tensors/{i:05d}.bin"
        entries[name] = {"shape": list(arr.shape), "dtype": "float32", "file": blob_name}
        blobs.append((blob_name, arr.astype("<f4").tobytes()))
    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "meta": meta,
        "tensors": entries,
    }
    manifest_bytes = json.dumps(manifest, sort_keys=True, indent=1).encode("utf-8")
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        info = zipfile.ZipInfo("manifest.json", date_time=_ZIP_DATE)
        zf.writestr(info, manifest_bytes)
        for blob_name, data in blobs:
            info = zipfile.ZipInfo(blob_name, date_time=_ZIP_DATE)
            zf.writestr(info, data)


def load_checkpoint(path: str | Path) -> Checkpoint:
    """Read an archive written by :func:`save_checkpoint`."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            if manifest.get("format") != FORMAT_NAME:
                raise CheckpointError(f"not a {FORMAT_NAME} archive: {path}")
            tensors = {}
            for name, entry in manifest["tensors"].items():
                raw = zf.read(entry["file"])
                arr = np.frombuffer(raw, dtype="<f4")
                expected = int(np.prod(entry["shape"])) if entry["shape"] else 1
                if arr.size != expected:
                    raise CheckpointError(
                        f"tensor {name!r} in {path} has {arr.size} values, expected {expected}"
                    )
                tensors[name] = arr.reshape(entry["shape"]).astype(np.float32)
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    return Checkpoint(tensors=tensors, meta=manifest["meta"])


def module_state_tensors(module: nn.Module, prefix: str = "") -> dict[str, np.ndarray]:
    """Flatten a module's parameters and buffers (BN statistics included)."""
    out = {}
    for name, tensor in module.state_dict().items():
        out[prefix + name] = tensor.detach().cpu().to(torch.float32).numpy()
    return out


def load_module_state(module: nn.Module, tensors: Mapping[str, np.ndarray], prefix: str = "") -> None:
    """Restore a module from tensors written by :func:`module_state_tensors`."""
    state = module.state_dict()
    new_state = {}
    for name, current in state.items():
        key = prefix + name
        if key not in tensors:
            raise CheckpointError(f"missing tensor {key!r} in checkpoint")
        arr = tensors[key]
        if list(arr.shape) != list(current.shape):
            raise CheckpointError(
                f"tensor {key!r} has shape {list(arr.shape)}, module expects {list(current.shape)}"
            )
        new_state[name] = torch.from_numpy(np.array(arr)).to(current.dtype)
    module.load_state_dict(new_state)


def optimizer_state_tensors(
    optimizer: torch.optim.Optimizer, named_params: list[tuple[str, nn.Parameter]],
    prefix: str = "opt.",
) -> dict[str, np.ndarray]:
    """Flatten Adam moment buffers and step counters, keyed by parameter name."""
    out = {}
    for name, param in named_params:
        state = optimizer.state.get(param)
        if not state:
            continue
        for field in ("exp_avg", "exp_avg_sq"):
            out[f"{prefix}{name}.{field}"] = (
                state[field].detach().cpu().to(torch.float32).numpy()
            )
        step = state["step"]
        step_value = float(step.item() if torch.is_tensor(step) else step)
        out[f"{prefix}{name}.step"] = np.array(step_value, dtype=np.float32)
    return out


def load_optimizer_state(
    optimizer: torch.optim.Optimizer, named_params: list[tuple[str, nn.Parameter]],
    tensors: Mapping[str, np.ndarray], prefix: str = "opt.",
) -> None:
    """Restore Adam state written by :func:`optimizer_state_tensors`."""
    for name, param in named_params:
        key = f"{prefix}{name}.exp_avg"
        if key not in tensors:
            continue
        optimizer.state[param] = {
            "step": torch.tensor(float(tensors[f"{prefix}{name}.step"]), dtype=torch.float32),
            "exp_avg": torch.from_numpy(np.array(tensors[f"{prefix}{name}.exp_avg"])).to(param.dtype),
            "exp_avg_sq": torch.from_numpy(np.array(tensors[f"{prefix}{name}.exp_avg_sq"])).to(param.dtype),
        }
