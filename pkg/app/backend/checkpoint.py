"""Checkpoint directories: one raw little-endian tensor file per parameter plus a JSON manifest."""
import json
from pathlib import Path
from typing import Any, Optional

import numpy as np
import torch

MANIFEST_NAME = "manifest.json"
FORMAT_VERSION = 1

_DTYPES = {
    "float32": (torch.float32, "<f4"),
    "float64": (torch.float64, "<f8"),
    "int64": (torch.int64, "<i8"),
    "bool": (torch.bool, "|b1"),
}


class MissingCheckpointError(FileNotFoundError):
    pass


def _dtype_name(tensor: torch.Tensor) -> str:
    for name, (dtype, _) in _DTYPES.items():
        if tensor.dtype == dtype:
            return name
    raise ValueError(f"unsupported tensor dtype {tensor.dtype}")


def save_state(state: dict[str, torch.Tensor], directory: Path, meta: Optional[dict[str, Any]] = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensors = {}
    for name, tensor in state.items():
        dtype = _dtype_name(tensor)
        filename = f"{name}.bin"
        array = tensor.detach().cpu().contiguous().numpy().astype(_DTYPES[dtype][1], copy=False)
        (directory / filename).write_bytes(array.tobytes(order="C"))
        tensors[name] = {"shape": list(tensor.shape), "dtype": dtype, "file": filename}
    manifest = {"format": FORMAT_VERSION, "tensors": tensors, "meta": meta or {}}
    (directory / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return directory


def read_manifest(directory: Path) -> dict[str, Any]:
    path = Path(directory) / MANIFEST_NAME
    if not path.exists():
        raise MissingCheckpointError(f"no checkpoint manifest at {path}")
    return json.loads(path.read_text())


def load_state(directory: Path) -> tuple[dict[str, torch.Tensor], dict[str, Any]]:
    directory = Path(directory)
    manifest = read_manifest(directory)
    state = {}
    for name, entry in manifest["tensors"].items():
        torch_dtype, np_dtype = _DTYPES[entry["dtype"]]
        raw = (directory / entry["file"]).read_bytes()
        array = np.frombuffer(raw, dtype=np_dtype).reshape(entry["shape"]).copy()
        state[name] = torch.from_numpy(array).to(torch_dtype)
    return state, manifest["meta"]


def save_module(module: torch.nn.Module, directory: Path, meta: Optional[dict[str, Any]] = None) -> Path:
    return save_state(module.state_dict(), directory, meta)


def load_module(module: torch.nn.Module, directory: Path) -> dict[str, Any]:
    state, meta = load_state(directory)
    module.load_state_dict(state)
    return meta
