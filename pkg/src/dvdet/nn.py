"""Dense numeric primitives, parameter storage and the training toolkit.

Everything works on float64 numpy arrays. Layers implement their own
backward passes; :func:`finite_diff_grad` is the oracle they are checked
against.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from dvdet.errors import CheckpointError, DomainError

DTYPE = np.float64


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator; equal seeds replay equal streams."""
    return np.random.Generator(np.random.Philox(key=int(seed)))


def softmax(v: np.ndarray, axis: int = -1) -> np.ndarray:
    v = np.asarray(v, dtype=DTYPE)
    if v.size == 0:
        raise DomainError("softmax of an empty vector")
    shifted = v - np.max(v, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def cross_entropy(p: np.ndarray, y: np.ndarray) -> float:
    """Return ``-sum(y * log p)`` for a one-hot ``y``, with ``p`` clamped at 1e-12."""
    p = np.asarray(p, dtype=DTYPE)
    y = np.asarray(y, dtype=DTYPE)
    if p.shape != y.shape or p.ndim != 1:
        raise DomainError(f"shape mismatch: p{p.shape} vs y{y.shape}")
    if abs(p.sum() - 1.0) > 1e-6:
        raise DomainError(f"p must sum to 1 (got {p.sum():.8f})")
    if not (np.count_nonzero(y) == 1 and y.max() == 1.0):
        raise DomainError("y must be one-hot")
    return float(-np.log(max(p[int(np.argmax(y))], 1e-12)))


def one_hot(index: int, k: int) -> np.ndarray:
    if not 0 <= index < k:
        raise DomainError(f"class {index} out of range for {k} classes")
    y = np.zeros(k, dtype=DTYPE)
    y[index] = 1.0
    return y


def leaky_relu(x: np.ndarray, slope: float) -> np.ndarray:
    return np.where(x > 0, x, slope * x)


def elu(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


def sigmoid(x: np.ndarray) -> np.ndarray:
    # exp of a non-positive argument never overflows and keeps relative precision in both tails
    x = np.asarray(x, dtype=DTYPE)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(DTYPE)


@dataclass
class Param:
    value: np.ndarray
    grad: np.ndarray | None = None
    adam_m: np.ndarray = field(default=None)  # type: ignore[assignment]
    adam_v: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        self.value = np.asarray(self.value, dtype=DTYPE)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.adam_m is None:
            self.adam_m = np.zeros_like(self.value)
        if self.adam_v is None:
            self.adam_v = np.zeros_like(self.value)


class ParamStore:
    """Named trainable tensors with gradient and Adam moment slots."""

    def __init__(self) -> None:
        self._entries: dict[str, Param] = {}

    def add(self, name: str, value: np.ndarray) -> Param:
        if name in self._entries:
            raise KeyError(f"duplicate parameter {name!r}")
        param = Param(np.array(value, dtype=DTYPE))
        self._entries[name] = param
        return param

    def __getitem__(self, name: str) -> Param:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def items(self):
        return self._entries.items()

    def names(self) -> list[str]:
        return list(self._entries)

    def value(self, name: str) -> np.ndarray:
        return self._entries[name].value

    def accumulate(self, name: str, grad: np.ndarray) -> None:
        self._entries[name].grad += grad

    def zero_grad(self) -> None:
        for p in self._entries.values():
            p.grad = np.zeros_like(p.value)

    def grads(self) -> dict[str, np.ndarray]:
        return {k: p.grad.copy() for k, p in self._entries.items()}

    def copy(self) -> ParamStore:
        other = ParamStore()
        for name, p in self._entries.items():
            other._entries[name] = Param(
                p.value.copy(), p.grad.copy() if p.grad is not None else None, p.adam_m.copy(), p.adam_v.copy()
            )
        return other

    def n_scalars(self) -> int:
        return sum(p.value.size for p in self._entries.values())


def adam_step(
    store: ParamStore,
    lr: float,
    t: int,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> ParamStore:
    """Bias-corrected Adam update of every entry, then zero the gradients."""
    if t < 1:
        raise DomainError("Adam step index starts at 1")
    b1, b2 = betas
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in store.items():
        if p.grad is None:
            raise ValueError(f"parameter {name!r} has no gradient")
        g = p.grad
        assert np.all(np.isfinite(g)), f"non-finite gradient in {name}"
        p.adam_m = b1 * p.adam_m + (1.0 - b1) * g
        p.adam_v = b2 * p.adam_v + (1.0 - b2) * g * g
        p.value = p.value - lr * (p.adam_m / c1) / (np.sqrt(p.adam_v / c2) + eps)
        p.grad = np.zeros_like(p.value)
    return store


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    """Cosine annealing from ``lr0`` at step 0 to 0 at ``total_steps``."""
    if total_steps < 1 or not 0 <= step <= total_steps:
        raise DomainError(f"step {step} outside [0, {total_steps}]")
    return 0.5 * lr0 * (1.0 + math.cos(math.pi * step / total_steps))


def dropout_mask(
    shape: tuple[int, ...] | int,
    rate: float,
    rng: np.random.Generator | int | None = None,
    training: bool = True,
) -> np.ndarray:
    """Inverted-dropout keep mask; all ones outside training or at rate 0."""
    if not 0.0 <= rate < 1.0:
        raise DomainError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return np.ones(shape, dtype=DTYPE)
    if rng is None or isinstance(rng, (int, np.integer)):
        rng = make_rng(0 if rng is None else int(rng))
    keep = rng.random(shape) >= rate
    return keep.astype(DTYPE) / (1.0 - rate)


def finite_diff_grad(
    f: Callable[[ParamStore], float],
    store: ParamStore,
    eps: float = 1e-5,
    names: list[str] | None = None,
) -> dict[str, np.ndarray]:
    """Central-difference gradient of ``f`` with respect to each parameter."""
    out: dict[str, np.ndarray] = {}
    for name in names or store.names():
        p = store[name]
        grad = np.zeros_like(p.value)
        flat = p.value.reshape(-1)
        gflat = grad.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            hi = f(store)
            flat[k] = orig - eps
            lo = f(store)
            flat[k] = orig
            gflat[k] = (hi - lo) / (2.0 * eps)
        out[name] = grad
    return out


def max_relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """``max |a-b| / max(|a|, |b|, floor)`` elementwise."""
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


# Checkpoint layout (all integers little-endian):
#   magic b"DVDETCKP", u32 version, u32 meta_len, meta JSON (utf-8),
#   u32 entry count, then per entry: u16 name_len, name, u8 ndim,
#   u32 * ndim shape, float64 data.
CHECKPOINT_MAGIC = b"DVDETCKP"
CHECKPOINT_VERSION = 1


def save_checkpoint(path: str | Path, store: ParamStore, meta: dict | None = None) -> None:
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    buf = bytearray(CHECKPOINT_MAGIC)
    buf += struct.pack("<II", CHECKPOINT_VERSION, len(meta_bytes))
    buf += meta_bytes
    buf += struct.pack("<I", len(store))
    for name, p in store.items():
        raw = name.encode()
        buf += struct.pack("<H", len(raw)) + raw
        buf += struct.pack("<B", p.value.ndim)
        buf += struct.pack(f"<{p.value.ndim}I", *p.value.shape)
        buf += np.ascontiguousarray(p.value, dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path: str | Path) -> tuple[ParamStore, dict]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from exc
    try:
        return _parse_checkpoint(data)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc


def _parse_checkpoint(data: bytes) -> tuple[ParamStore, dict]:
    if data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    pos = 8
    version, meta_len = struct.unpack_from("<II", data, pos)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos += 8
    meta = json.loads(data[pos : pos + meta_len].decode())
    pos += meta_len
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    store = ParamStore()
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos : pos + nlen].decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        if pos + 8 * size > len(data):
            raise ValueError(f"entry {name!r} runs past end of file")
        arr = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape)
        pos += 8 * size
        store.add(name, arr.astype(DTYPE))
    if pos != len(data):
        raise ValueError("trailing bytes after last entry")
    return store, meta
