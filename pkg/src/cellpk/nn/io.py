"""``CPKW1`` weight files.

Layout (all integers little-endian)::

    b"CPKW1\\n"
    u32 tensor count
    per tensor:
        u16 name length, UTF-8 name
        u8  rank, u32 per dimension
        float32 values, C order

Names starting with ``__`` are metadata (e.g. ``__input_shape__``) and are not
matched against graph weights. Training checkpoints use the same container;
float64 scalars are stored bit-exactly as pairs of 32-bit words.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .graph import ModelGraph, Tensor
from .optim import AdamState, EarlyStopping

__all__ = [
    "MAGIC",
    "WeightFileError",
    "encode_tensors",
    "decode_tensors",
    "save_weights",
    "load_weights",
    "read_tensors",
    "save_checkpoint",
    "load_checkpoint",
]

MAGIC = b"CPKW1\n"
INPUT_SHAPE_KEY = "__input_shape__"


class WeightFileError(ValueError):
    pass


def encode_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise WeightFileError(f"tensor {name!r} cannot be encoded")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_tensors(data: bytes) -> dict[str, np.ndarray]:
    if not data.startswith(MAGIC):
        raise WeightFileError(f"bad magic {data[:6]!r}; not a CPKW1 file")
    pos = len(MAGIC)

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise WeightFileError(f"truncated file at byte {pos}")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(dims, dtype=np.int64))
        values = np.frombuffer(take(4 * size), dtype="<f4").astype(np.float32).reshape(dims)
        if name in out:
            raise WeightFileError(f"duplicate tensor {name!r}")
        out[name] = values
    if pos != len(data):
        raise WeightFileError(f"{len(data) - pos} trailing bytes after last tensor")
    return out


def read_tensors(path: str | os.PathLike) -> dict[str, np.ndarray]:
    return decode_tensors(Path(path).read_bytes())


def save_weights(graph: ModelGraph, path: str | os.PathLike) -> None:
    tensors = {INPUT_SHAPE_KEY: np.asarray(graph.input_shape, dtype=np.float32)}
    tensors.update({k: t.values for k, t in graph.weights.items()})
    Path(path).write_bytes(encode_tensors(tensors))


def load_weights(graph: ModelGraph, path: str | os.PathLike) -> ModelGraph:
    """Copy tensors from ``path`` into ``graph``; names and shapes must match exactly."""
    tensors = {k: v for k, v in read_tensors(path).items() if not k.startswith("__")}
    for name, t in graph.weights.items():
        if name not in tensors:
            raise WeightFileError(f"tensor {name!r} missing from {path}")
        if tensors[name].shape != t.shape:
            raise WeightFileError(f"tensor {name!r}: file shape {tensors[name].shape} != graph shape {t.shape}")
    extra = [k for k in tensors if k not in graph.weights]
    if extra:
        raise WeightFileError(f"tensor {extra[0]!r} in {path} has no counterpart in the graph")
    for name, t in graph.weights.items():
        graph.weights[name] = Tensor(tensors[name].astype(graph.dtype))
    return graph


# --- training checkpoints --------------------------------------------------

_CKPT_META = "__checkpoint__"


def _pack_f64(values) -> np.ndarray:
    return np.asarray(values, dtype="<f8").view("<f4")


def _unpack_f64(arr: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(arr, dtype="<f4").view("<f8")


def save_checkpoint(ckpt, graph: ModelGraph, path: str | os.PathLike) -> None:
    """Write a :class:`~cellpk.nn.train.Checkpoint` for ``graph``."""
    stop = ckpt.stopper
    meta = [
        ckpt.epoch,
        ckpt.adam.step,
        -1 if stop is None else stop.patience,
        np.nan if stop is None else stop.best_loss,
        -1 if stop is None or stop.best_epoch is None else stop.best_epoch,
        -1 if stop is None else stop.bad_epochs,
    ]
    tensors = {
        INPUT_SHAPE_KEY: np.asarray(graph.input_shape, dtype=np.float32),
        _CKPT_META: _pack_f64(meta),
    }
    for name, values in ckpt.weights.items():
        tensors[name] = values
        if name in ckpt.adam.m:
            tensors[f"__adam_m__/{name}"] = ckpt.adam.m[name]
            tensors[f"__adam_v__/{name}"] = ckpt.adam.v[name]
        if ckpt.best_weights is not None:
            tensors[f"__best__/{name}"] = ckpt.best_weights[name]
    Path(path).write_bytes(encode_tensors(tensors))


def load_checkpoint(path: str | os.PathLike):
    """Read a checkpoint written by :func:`save_checkpoint`."""
    from .train import Checkpoint

    tensors = read_tensors(path)
    if _CKPT_META not in tensors:
        raise WeightFileError(f"{path} is a plain weight file, not a training checkpoint")
    epoch, step, patience, best_loss, best_epoch, bad = _unpack_f64(tensors[_CKPT_META]).tolist()
    weights = {k: v for k, v in tensors.items() if not k.startswith("__")}
    adam = AdamState(step=int(step))
    best = {} if f"__best__/{next(iter(weights), '')}" in tensors else None
    for name in weights:
        if f"__adam_m__/{name}" in tensors:
            adam.m[name] = tensors[f"__adam_m__/{name}"]
            adam.v[name] = tensors[f"__adam_v__/{name}"]
        if best is not None:
            best[name] = tensors[f"__best__/{name}"]
    stopper = None
    if patience >= 1:
        stopper = EarlyStopping(int(patience))
        stopper.best_loss = best_loss
        stopper.best_epoch = None if best_epoch < 0 else int(best_epoch)
        stopper.bad_epochs = int(bad)
    return Checkpoint(int(epoch), weights, adam, stopper, best)
