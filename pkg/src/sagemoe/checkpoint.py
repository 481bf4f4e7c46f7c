"""Binary checkpoint container.

Layout (all integers little-endian u32)::

    b"SAGE" | version | config_len | config text (UTF-8, canonical key = value lines)
    | n_tensors | per tensor: name_len | name | rank | extents... | float64 LE values
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .model import ModelConfig, SageUNet

MAGIC = b"SAGE"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode(config: ModelConfig, state: dict[str, np.ndarray]) -> bytes:
    text = config.to_text().encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(text)), text, struct.pack("<I", len(state))]
    for name, arr in state.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def decode(buf: bytes) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"truncated checkpoint at byte {pos}")
        out = buf[pos : pos + n]
        pos += n
        return out

    if take(4) != MAGIC:
        raise CheckpointError("bad magic; not a SAGE checkpoint")
    version, text_len = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    config = ModelConfig.from_text(take(text_len).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    state = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(shape, dtype=np.int64))
        state[name] = np.frombuffer(take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes after the last tensor")
    return config, state


def save(path, model: SageUNet, state: dict[str, np.ndarray] | None = None) -> None:
    Path(path).write_bytes(encode(model.config, state if state is not None else model.state_dict()))


def load(path) -> SageUNet:
    config, state = decode(Path(path).read_bytes())
    model = SageUNet(config)
    model.load_state_dict(state)
    return model
