"""Versioned checkpoint container.

Layout: a magic line, one JSON header line, then the raw little-endian tensor
bytes back to back. The header records the model configuration, training step
and, per tensor, its dot-separated name, shape, dtype tag and byte range. No
timestamps are stored, so equal parameters give byte-identical files.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .model import DocModel, ModelConfig, init_params
from .tensor import Tensor

MAGIC = b"DOCFUSE-CKPT\n"
VERSION = 1
_DTYPES = {"f8": "<f8", "f4": "<f4"}


def _tag(arr: np.ndarray) -> str:
    if arr.dtype == np.float64:
        return "f8"
    if arr.dtype == np.float32:
        return "f4"
    raise CheckpointError(f"unsupported dtype {arr.dtype}")


def save_checkpoint(path, model: DocModel, opt=None, step: int = 0) -> None:
    arrays = {k: p.data for k, p in model.params.items()}
    if opt is not None:
        arrays.update(opt.state())
    entries, blobs, offset = [], [], 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        tag = _tag(arr)
        raw = arr.astype(_DTYPES[tag]).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": tag, "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {"version": VERSION, "model_config": model.cfg.to_dict(), "step": step, "tensors": entries}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for raw in blobs:
            fh.write(raw)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    blob = path.read_bytes()
    if not blob.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    end = blob.index(b"\n", len(MAGIC))
    header = json.loads(blob[len(MAGIC):end])
    if header.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')}")
    base = end + 1
    arrays = {}
    for e in header["tensors"]:
        raw = blob[base + e["offset"]: base + e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=_DTYPES[e["dtype"]]).reshape(e["shape"])
        arrays[e["name"]] = arr.astype(arr.dtype.newbyteorder("="))
    return header, arrays


def load_checkpoint(path, with_optimizer: bool = False):
    """Rebuild a :class:`DocModel`; validates names and shapes against the
    stored configuration. With ``with_optimizer`` also returns optimiser
    arrays and the saved step."""
    header, arrays = read_checkpoint(path)
    cfg = ModelConfig.from_dict(header["model_config"])
    expected = {k: p.shape for k, p in init_params(cfg, seed=0).items()}
    got = {k: v.shape for k, v in arrays.items() if not k.startswith("opt.")}
    missing, extra = set(expected) - set(got), set(got) - set(expected)
    if missing or extra:
        raise CheckpointError(f"parameter names differ from config: missing {sorted(missing)}, extra {sorted(extra)}")
    for k, shape in expected.items():
        if got[k] != shape:
            raise CheckpointError(f"{k}: shape {got[k]} but config implies {shape}")
    params = {k: Tensor(arrays[k].copy(), requires_grad=True, name=k) for k in expected}
    model = DocModel(cfg, params)
    if not with_optimizer:
        return model
    opt_arrays = {k: v for k, v in arrays.items() if k.startswith("opt.")}
    return model, opt_arrays, int(header.get("step", 0))
