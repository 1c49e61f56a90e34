"""Named parameter stores, SGD/Adam updates, and the checkpoint container.

The checkpoint file is a custom binary: magic ``PTCK``, version, a JSON
metadata block, the named float64 tensors, and a trailing SHA-256 over
everything before it. Writing the same content twice yields identical
bytes.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .errors import DataError

CHECKPOINT_MAGIC = b"PTCK"
CHECKPOINT_VERSION = 1


class ParamStore:
    """Ordered name -> Tensor map plus per-parameter Adam state."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._adam_m: dict[str, np.ndarray] = {}
        self._adam_v: dict[str, np.ndarray] = {}
        self._adam_t: int = 0

    def add(self, name: str, values: np.ndarray, requires_grad: bool = True) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(values, dtype=np.float64), requires_grad=requires_grad)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def num_values(self) -> int:
        return sum(t.size for t in self._params.values())

    def clone(self) -> "ParamStore":
        """Deep copy: values and optimizer state are independent of the source."""
        out = ParamStore()
        for name, t in self._params.items():
            out.add(name, t.data.copy(), requires_grad=t.requires_grad)
        out._adam_m = {k: v.copy() for k, v in self._adam_m.items()}
        out._adam_v = {k: v.copy() for k, v in self._adam_v.items()}
        out._adam_t = self._adam_t
        return out

    def apply_delta(self, grads: dict[int, np.ndarray], lr: float) -> "ParamStore":
        """Non-mutating gradient step: a fresh store holding p - lr * g."""
        out = ParamStore()
        for name, t in self._params.items():
            g = grads.get(id(t))
            vals = t.data - lr * g if g is not None else t.data.copy()
            out.add(name, vals, requires_grad=t.requires_grad)
        return out

    def copy_values_from(self, other: "ParamStore") -> None:
        for name, t in self._params.items():
            t.data[...] = other._params[name].data

    def value_hash(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self._params):
            h.update(name.encode())
            h.update(self._params[name].data.tobytes())
        return h.hexdigest()


def sgd_step(store: ParamStore, grads: dict[int, np.ndarray], lr: float) -> None:
    """In-place plain gradient descent; allocates no optimizer state."""
    for _, t in store.items():
        g = grads.get(id(t))
        if g is not None:
            if g.shape != t.data.shape:
                raise ValueError("gradient shape mismatch")
            t.data -= lr * g


def adam_step(store: ParamStore, grads: dict[int, np.ndarray], lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """In-place Adam update with bias correction; state lives on the store."""
    store._adam_t += 1
    t_step = store._adam_t
    for name, t in store.items():
        g = grads.get(id(t))
        if g is None:
            continue
        if g.shape != t.data.shape:
            raise ValueError("gradient shape mismatch")
        m = store._adam_m.setdefault(name, np.zeros_like(t.data))
        v = store._adam_v.setdefault(name, np.zeros_like(t.data))
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        mhat = m / (1.0 - beta1 ** t_step)
        vhat = v / (1.0 - beta2 ** t_step)
        t.data -= lr * mhat / (np.sqrt(vhat) + eps)


# ---------------------------------------------------------------------------
# checkpoint container

def save_tensor_file(path: Path | str, tensors: dict[str, np.ndarray], meta: dict) -> None:
    """Write a named-tensor container; byte-stable for identical content."""
    buf = bytearray()
    buf += CHECKPOINT_MAGIC
    buf += struct.pack("<I", CHECKPOINT_VERSION)
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    buf += struct.pack("<I", len(meta_bytes))
    buf += meta_bytes
    buf += struct.pack("<I", len(tensors))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype=np.float64)
        nb = name.encode()
        buf += struct.pack("<H", len(nb))
        buf += nb
        buf += struct.pack("<B", arr.ndim)
        for dim in arr.shape:
            buf += struct.pack("<I", dim)
        buf += arr.tobytes()
    buf += hashlib.sha256(bytes(buf)).digest()
    Path(path).write_bytes(bytes(buf))


def load_tensor_file(path: Path | str) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing tensor file: {path}")
    raw = path.read_bytes()
    if len(raw) < 44 or raw[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"corrupt tensor file (bad magic): {path}")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise DataError(f"checksum mismatch: {path}")
    off = 4
    (version,) = struct.unpack_from("<I", body, off)
    off += 4
    if version != CHECKPOINT_VERSION:
        raise DataError(f"unsupported tensor file version {version}: {path}")
    (meta_len,) = struct.unpack_from("<I", body, off)
    off += 4
    meta = json.loads(body[off:off + meta_len].decode())
    off += meta_len
    (count,) = struct.unpack_from("<I", body, off)
    off += 4
    tensors: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", body, off)
            off += 2
            name = body[off:off + name_len].decode()
            off += name_len
            (ndim,) = struct.unpack_from("<B", body, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", body, off) if ndim else ()
            off += 4 * ndim
            n = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(body, dtype="<f8", count=n, offset=off).reshape(shape)
            off += 8 * n
            tensors[name] = arr.copy()
    except (struct.error, ValueError) as e:
        raise DataError(f"truncated tensor file: {path}") from e
    return tensors, meta
