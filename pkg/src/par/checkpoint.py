"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"PARCKPT1"
    u32   format version
    u32   config text length, then UTF-8 config text
    u32   tensor count
    per tensor:
        u16  name length, UTF-8 name
        u8   dtype tag (1 = float32)
        u8   ndim
        u32  * ndim dims
        float32 payload, little-endian, C order
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import ContractViolation

MAGIC = b"PARCKPT1"
VERSION = 1
DTYPE_F32 = 1


class CheckpointError(ContractViolation):
    pass


@dataclass
class Checkpoint:
    config_text: str = ""
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def add_module(self, prefix: str, module: torch.nn.Module) -> None:
        for name, t in module.state_dict().items():
            self.tensors[f"{prefix}.{name}"] = t.detach().cpu().numpy().astype("<f4")

    def section(self, prefix: str) -> dict[str, np.ndarray]:
        p = prefix + "."
        return {k[len(p) :]: v for k, v in self.tensors.items() if k.startswith(p)}


def _pack(ckpt: Checkpoint) -> bytes:
    out = [MAGIC, struct.pack("<I", VERSION)]
    text = ckpt.config_text.encode("utf-8")
    out.append(struct.pack("<I", len(text)) + text)
    out.append(struct.pack("<I", len(ckpt.tensors)))
    for name, arr in ckpt.tensors.items():
        a = np.asarray(arr, order="C")  # ascontiguousarray would turn 0-d into 1-d
        if a.dtype != np.float32:
            raise CheckpointError(f"tensor {name!r} has dtype {a.dtype}; only float32 is stored")
        nb = name.encode("utf-8")
        out.append(struct.pack("<H", len(nb)) + nb)
        out.append(struct.pack("<BB", DTYPE_F32, a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape))
        out.append(a.astype("<f4").tobytes())
    return b"".join(out)


def save(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(_pack(ckpt))
    tmp.replace(path)
    return path


def load(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    buf = memoryview(path.read_bytes())
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(8)) != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise CheckpointError(f"{path}: format version {version}, this build reads version {VERSION}")
    (n_text,) = struct.unpack("<I", take(4))
    text = bytes(take(n_text)).decode("utf-8")
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (n_name,) = struct.unpack("<H", take(2))
        name = bytes(take(n_name)).decode("utf-8")
        tag, ndim = struct.unpack("<BB", take(2))
        if tag != DTYPE_F32:
            raise CheckpointError(f"{path}: tensor {name!r} has unknown dtype tag {tag}")
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(take(4 * size), dtype="<f4").reshape(shape).copy()
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return Checkpoint(text, tensors)


def load_module(module: torch.nn.Module, tensors: dict[str, np.ndarray], what: str = "module") -> None:
    """Copy ``tensors`` into ``module``; unknown or missing names are listed in the error."""
    state = module.state_dict()
    unknown = sorted(set(tensors) - set(state))
    missing = sorted(set(state) - set(tensors))
    if unknown or missing:
        raise CheckpointError(f"{what}: unknown tensors {unknown}; missing tensors {missing}")
    bad = [k for k in state if tuple(state[k].shape) != tuple(tensors[k].shape)]
    if bad:
        raise CheckpointError(f"{what}: shape mismatch for {bad}")
    module.load_state_dict({k: torch.from_numpy(v).to(state[k].dtype) for k, v in tensors.items()})


def check_names(ckpt: Checkpoint, prefixes) -> None:
    unknown = sorted(k for k in ckpt.tensors if not k.startswith(tuple(p + "." for p in prefixes)))
    if unknown:
        raise CheckpointError(f"unknown tensors in checkpoint: {unknown}")
