"""Dense kernels, parameter storage, Adam, and a finite-difference checker.

Everything is float64. Gradients are derived by hand in the model modules;
``grad_check`` is the safety net for those derivations.

Checkpoint layout (all integers little-endian)::

    magic      8 bytes   b"ENIRECCK"
    version    uint32    currently 1
    meta_len   uint32    length of the JSON metadata blob
    meta       bytes     UTF-8 JSON object (embedding dim, seed, config)
    n_blocks   uint32
    repeated n_blocks times:
        name_len  uint16
        name      bytes     UTF-8 block name, e.g. "gru_pre.W"
        ndim      uint8
        shape     ndim x uint64
        payload   prod(shape) x float64, C order
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .errors import FormatError, NumericError, ShapeError

CHECKPOINT_MAGIC = b"ENIRECCK"
CHECKPOINT_VERSION = 1

GRU_BLOCKS = ("gru_pre", "gru_longterm")
MLP_BLOCKS = ("mlp_cur", "mlp_sim", "mlp_his")


def _require_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {what}")


def softmax(v: np.ndarray) -> np.ndarray:
    """Max-subtracted softmax over the last axis."""
    v = np.asarray(v, dtype=np.float64)
    _require_finite(v, "softmax input")
    shifted = v - v.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    _require_finite(v, "log_softmax input")
    shifted = v - v.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def inner_product(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"inner_product needs equal-length vectors, got {a.shape} and {b.shape}")
    return float(a @ b)


@dataclass
class MLPBlock:
    """One-hidden-layer perceptron: ``W2 @ tanh(W1 @ x + b1) + b2``."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    @property
    def in_dim(self) -> int:
        return self.W1.shape[1]


def _check_mlp_input(x: np.ndarray, block: MLPBlock) -> None:
    if x.shape[-1] != block.in_dim:
        raise ShapeError(f"MLP expects input dim {block.in_dim}, got {x.shape}")


def mlp_forward(x: np.ndarray, block: MLPBlock) -> np.ndarray:
    return mlp_forward_cached(x, block)[0]


def mlp_forward_cached(x: np.ndarray, block: MLPBlock) -> tuple[np.ndarray, np.ndarray]:
    """Forward pass returning ``(out, hidden)``; ``x`` may be a vector or a row batch."""
    x = np.asarray(x, dtype=np.float64)
    _check_mlp_input(x, block)
    hidden = np.tanh(x @ block.W1.T + block.b1)
    return hidden @ block.W2.T + block.b2, hidden


def mlp_backward(x: np.ndarray, hidden: np.ndarray, dout: np.ndarray, block: MLPBlock,
                 grads: MLPBlock) -> np.ndarray:
    """Accumulate parameter gradients into ``grads`` and return d(loss)/dx."""
    x2 = np.atleast_2d(x)
    h2 = np.atleast_2d(hidden)
    d2 = np.atleast_2d(dout)
    grads.W2 += d2.T @ h2
    grads.b2 += d2.sum(axis=0)
    dpre = (d2 @ block.W2) * (1.0 - h2 * h2)
    grads.W1 += dpre.T @ x2
    grads.b1 += dpre.sum(axis=0)
    dx = dpre @ block.W1
    return dx.reshape(np.shape(x))


class ParameterStore:
    """Named float64 arrays with same-shape gradient slots.

    Names use ``block.array`` form (``gru_pre.W``, ``mlp_cur.b2``); the
    embedding table is the single-array block ``item_embeddings``.
    """

    def __init__(self, d: int, seed: int = 0):
        self.d = d
        self.seed = seed
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray) -> None:
        value = np.ascontiguousarray(value, dtype=np.float64)
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> list[str]:
        return list(self.params)

    def block_of(self, name: str) -> str:
        return name.split(".", 1)[0]

    def block_names(self) -> list[str]:
        seen: dict[str, None] = {}
        for name in self.params:
            seen.setdefault(self.block_of(name), None)
        return list(seen)

    def arrays_in(self, block: str) -> list[str]:
        return [n for n in self.params if self.block_of(n) == block]

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def scale_grads(self, factor: float) -> None:
        for g in self.grads.values():
            g *= factor

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(g * g)) for g in self.grads.values())))

    def mlp(self, block: str) -> MLPBlock:
        p = self.params
        return MLPBlock(p[f"{block}.W1"], p[f"{block}.b1"], p[f"{block}.W2"], p[f"{block}.b2"])

    def mlp_grad(self, block: str) -> MLPBlock:
        g = self.grads
        return MLPBlock(g[f"{block}.W1"], g[f"{block}.b1"], g[f"{block}.W2"], g[f"{block}.b2"])

    def copy(self) -> "ParameterStore":
        other = ParameterStore(self.d, self.seed)
        for name, value in self.params.items():
            other.add(name, value.copy())
        return other

    def load_from(self, other: "ParameterStore") -> None:
        for name, value in other.params.items():
            self.params[name][...] = value

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(self.params[name].astype("<f8").tobytes())
        return h.hexdigest()


def init_store(item_count: int, d: int = 64, seed: int = 0, hidden: int | None = None) -> ParameterStore:
    """Uniform(-1/sqrt(d), 1/sqrt(d)) weights and embeddings, zero biases.

    The embedding table has ``item_count + 1`` rows; row 0 is padding and
    stays zero.
    """
    hidden = d if hidden is None else hidden
    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(d)
    store = ParameterStore(d, seed)

    def uniform(*shape):
        return rng.uniform(-bound, bound, size=shape)

    emb = uniform(item_count + 1, d)
    emb[0] = 0.0
    store.add("item_embeddings", emb)
    for block in GRU_BLOCKS:
        store.add(f"{block}.W", uniform(3 * d, d))
        store.add(f"{block}.U", uniform(3 * d, d))
        store.add(f"{block}.b", np.zeros(3 * d))
    for block in MLP_BLOCKS:
        store.add(f"{block}.W1", uniform(hidden, d))
        store.add(f"{block}.b1", np.zeros(hidden))
        store.add(f"{block}.W2", uniform(d, hidden))
        store.add(f"{block}.b2", np.zeros(d))
    return store


class Adam:
    """Adam with global gradient-norm clipping; zeroes gradients after each step."""

    def __init__(self, store: ParameterStore, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, clip: float | None = 5.0):
        self.store = store
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.clip = clip
        self.t = 0
        self.m = {n: np.zeros_like(p) for n, p in store.params.items()}
        self.v = {n: np.zeros_like(p) for n, p in store.params.items()}

    def step(self) -> float:
        """Apply one update; returns the pre-clipping gradient norm."""
        store = self.store
        for name, g in store.grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient in block {store.block_of(name)!r} ({name})")
        norm = store.grad_norm()
        scale = 1.0
        if self.clip is not None and norm > self.clip:
            scale = self.clip / norm
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in store.params.items():
            g = store.grads[name] * scale
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        store.zero_grad()
        return norm


def optimizer_step(store: ParameterStore, optimizer: Adam) -> float:
    return optimizer.step()


def relative_error(a: float, n: float) -> float:
    return abs(a - n) / max(1e-8, abs(a) + abs(n))


def grad_check(loss_fn: Callable[[ParameterStore], float], store: ParameterStore,
               probe_count: int | None = 20, eps: float = 1e-5, seed: int = 0,
               blocks: Iterable[str] | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn(store)`` must return the loss and accumulate its gradient into
    ``store.grads``. ``probe_count`` scalar entries are drawn uniformly from
    the arrays of the selected blocks (all blocks by default); ``None``
    probes every entry.
    """
    names = store.names() if blocks is None else [n for b in blocks for n in store.arrays_in(b)]
    store.zero_grad()
    loss_fn(store)
    analytic = {n: store.grads[n].copy() for n in names}
    store.zero_grad()

    sizes = np.array([store[n].size for n in names])
    rng = np.random.default_rng(seed)
    worst = 0.0
    probes = np.arange(sizes.sum()) if probe_count is None else rng.integers(0, sizes.sum(), size=probe_count)
    for flat in probes:
        which = int(np.searchsorted(np.cumsum(sizes), flat, side="right"))
        name = names[which]
        idx = int(flat - (sizes[:which].sum() if which else 0))
        arr = store[name].reshape(-1)
        orig = arr[idx]
        arr[idx] = orig + eps
        f_plus = loss_fn(store)
        arr[idx] = orig - eps
        f_minus = loss_fn(store)
        arr[idx] = orig
        store.zero_grad()
        numeric = (f_plus - f_minus) / (2 * eps)
        worst = max(worst, relative_error(float(analytic[name].reshape(-1)[idx]), numeric))
    return worst


def save_checkpoint(path: str | Path, store: ParameterStore, meta: dict | None = None) -> None:
    meta = dict(meta or {})
    meta.setdefault("d", store.d)
    meta.setdefault("seed", store.seed)
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(meta_bytes)), meta_bytes,
              struct.pack("<I", len(store.params))]
    for name, value in store.params.items():
        raw = name.encode()
        chunks.append(struct.pack("<HB", len(raw), value.ndim) + raw)
        chunks.append(struct.pack(f"<{value.ndim}Q", *value.shape))
        chunks.append(value.astype("<f8", copy=False).tobytes(order="C"))
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path) -> tuple[ParameterStore, dict]:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not an enirec checkpoint")
    version, meta_len = struct.unpack_from("<II", data, 8)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    pos = 16
    meta = json.loads(data[pos:pos + meta_len].decode())
    pos += meta_len
    (n_blocks,) = struct.unpack_from("<I", data, pos)
    pos += 4
    store = ParameterStore(int(meta["d"]), int(meta.get("seed", 0)))
    for _ in range(n_blocks):
        name_len, ndim = struct.unpack_from("<HB", data, pos)
        pos += 3
        name = data[pos:pos + name_len].decode()
        pos += name_len
        shape = struct.unpack_from(f"<{ndim}Q", data, pos)
        pos += 8 * ndim
        count = int(np.prod(shape)) if ndim else 1
        value = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(shape)
        pos += 8 * count
        store.add(name, value.astype(np.float64))
    return store, meta
