"""Flat binary checkpoint container.

Layout: 4-byte magic, u32 format version, u64 header length, UTF-8 JSON
header, then the concatenated little-endian float32 tensor payloads. The
header maps tensor names to shapes and byte offsets and carries a free
metadata dict (config snapshot, step counter, base64 RNG states, ...).

Tensors are written in sorted-name order so identical state produces an
identical file.
"""

from __future__ import annotations

import base64
import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"SDF1"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_tensors(path, tensors: dict, meta: dict | None = None):
    """Write name -> tensor/ndarray plus a JSON-able meta dict."""
    path = Path(path)
    names = sorted(tensors)
    index = {}
    blobs = []
    offset = 0
    for name in names:
        t = tensors[name]
        if isinstance(t, torch.Tensor):
            arr = t.detach().cpu().to(torch.float32).numpy()
        else:
            arr = np.asarray(t, dtype=np.float32)
        blob = np.ascontiguousarray(arr).astype("<f4").tobytes()
        index[name] = {"shape": list(arr.shape), "offset": offset, "nbytes": len(blob)}
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"tensors": index, "meta": meta or {}}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def load_tensors(path):
    """Read a container back: (dict name -> float32 ndarray, meta dict)."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}")
        (version,) = struct.unpack("<I", f.read(4))
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode("utf-8"))
        payload = f.read()
    tensors = {}
    for name, info in header["tensors"].items():
        start, n = info["offset"], info["nbytes"]
        if start + n > len(payload):
            raise CheckpointError(f"{path}: truncated payload for {name}")
        arr = np.frombuffer(payload[start : start + n], dtype="<f4").reshape(info["shape"])
        tensors[name] = arr.copy()
    return tensors, header["meta"]


# ---------------------------------------------------------------------------
# torch module / optimizer helpers
# ---------------------------------------------------------------------------


def module_tensors(module: torch.nn.Module, prefix: str = "") -> dict:
    return {prefix + name: t for name, t in module.state_dict().items()}


def load_module(module: torch.nn.Module, tensors: dict, prefix: str = ""):
    """Load float32 arrays into a module, strict on names and shapes."""
    state = module.state_dict()
    picked = {}
    for name, current in state.items():
        key = prefix + name
        if key not in tensors:
            raise CheckpointError(f"missing tensor {key!r} in checkpoint")
        arr = tensors[key]
        if tuple(arr.shape) != tuple(current.shape):
            raise CheckpointError(
                f"shape mismatch for {key!r}: checkpoint {tuple(arr.shape)}, module {tuple(current.shape)}"
            )
        picked[name] = torch.from_numpy(arr).to(current.dtype)
    module.load_state_dict(picked)


def optimizer_tensors(opt: torch.optim.Optimizer, prefix: str = "opt."):
    """Flatten optimizer state into (tensors, aux) for the container."""
    sd = opt.state_dict()
    tensors = {}
    for idx, state in sd["state"].items():
        for key, value in state.items():
            if isinstance(value, torch.Tensor):
                tensors[f"{prefix}{idx}.{key}"] = value
            else:  # plain python scalars (older step counters)
                tensors[f"{prefix}{idx}.{key}"] = torch.tensor(float(value))
    aux = {"param_groups": sd["param_groups"], "state_keys": {str(i): sorted(s) for i, s in sd["state"].items()}}
    return tensors, aux


def load_optimizer(opt: torch.optim.Optimizer, tensors: dict, aux: dict, prefix: str = "opt."):
    state = {}
    for idx_str, keys in aux["state_keys"].items():
        idx = int(idx_str)
        entry = {}
        for key in keys:
            arr = tensors[f"{prefix}{idx}.{key}"]
            entry[key] = torch.from_numpy(arr)
        state[idx] = entry
    opt.load_state_dict({"state": state, "param_groups": aux["param_groups"]})


# ---------------------------------------------------------------------------
# RNG state round-trips
# ---------------------------------------------------------------------------


def encode_rng(torch_gen: torch.Generator | None = None, np_rng: np.random.Generator | None = None) -> dict:
    out = {}
    if torch_gen is not None:
        out["torch"] = base64.b64encode(torch_gen.get_state().numpy().tobytes()).decode("ascii")
    if np_rng is not None:
        out["numpy"] = json.loads(json.dumps(np_rng.bit_generator.state))
    return out


def decode_rng(blob: dict, torch_gen: torch.Generator | None = None, np_rng: np.random.Generator | None = None):
    if torch_gen is not None and "torch" in blob:
        raw = base64.b64decode(blob["torch"])
        torch_gen.set_state(torch.from_numpy(np.frombuffer(raw, dtype=np.uint8).copy()))
    if np_rng is not None and "numpy" in blob:
        np_rng.bit_generator.state = blob["numpy"]
