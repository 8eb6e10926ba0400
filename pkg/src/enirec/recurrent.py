"""Gated recurrent unit with hand-written backpropagation through time.

Gate layout inside the stacked ``(3d, d)`` matrices is ``[update, reset,
candidate]``::

    z  = sigmoid(W_z x + U_z h + b_z)
    r  = sigmoid(W_r x + U_r h + b_r)
    hc = tanh(W_c x + U_c (r * h) + b_c)
    h' = (1 - z) * h + z * hc
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import CatalogError, PreconditionError, ShapeError
from .numerics import ParameterStore


@dataclass
class GRUBlock:
    W: np.ndarray  # (3d, d) input -> gates
    U: np.ndarray  # (3d, d) hidden -> gates
    b: np.ndarray  # (3d,)

    @property
    def d(self) -> int:
        return self.U.shape[1]

    @classmethod
    def from_store(cls, store: ParameterStore, name: str) -> "GRUBlock":
        return cls(store[f"{name}.W"], store[f"{name}.U"], store[f"{name}.b"])

    @classmethod
    def grads_from_store(cls, store: ParameterStore, name: str) -> "GRUBlock":
        g = store.grads
        return cls(g[f"{name}.W"], g[f"{name}.U"], g[f"{name}.b"])


@dataclass
class EncodeTrace:
    """Forward caches for one sequence; row n of each array belongs to step n+1."""

    X: np.ndarray       # inputs
    H_prev: np.ndarray  # h_{n-1}; first row is the zero initial state
    Z: np.ndarray
    R: np.ndarray
    HC: np.ndarray
    H: np.ndarray       # h_n
    items: np.ndarray | None = None

    def __len__(self) -> int:
        return self.H.shape[0]

    @property
    def final(self) -> np.ndarray:
        return self.H[-1]


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def gru_cell(x: np.ndarray, h_prev: np.ndarray, block: GRUBlock) -> np.ndarray:
    d = block.d
    if x.shape != (block.W.shape[1],) or h_prev.shape != (d,):
        raise ShapeError(f"gru_cell shapes x={x.shape} h={h_prev.shape} for d={d}")
    a = block.W @ x + block.b
    u = block.U[:2 * d] @ h_prev
    z = _sigmoid(a[:d] + u[:d])
    r = _sigmoid(a[d:2 * d] + u[d:])
    hc = np.tanh(a[2 * d:] + block.U[2 * d:] @ (r * h_prev))
    return (1.0 - z) * h_prev + z * hc


def gru_encode_inputs(X: np.ndarray, block: GRUBlock) -> EncodeTrace:
    """Fold the GRU over the rows of ``X`` starting from a zero state."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != block.W.shape[1]:
        raise ShapeError(f"GRU input must be (T, {block.W.shape[1]}), got {X.shape}")
    T, d = X.shape[0], block.d
    A = X @ block.W.T + block.b
    Uzr, Uc = block.U[:2 * d], block.U[2 * d:]
    H_prev = np.zeros((T, d))
    Z = np.empty((T, d))
    R = np.empty((T, d))
    HC = np.empty((T, d))
    H = np.empty((T, d))
    h = np.zeros(d)
    for n in range(T):
        H_prev[n] = h
        u = Uzr @ h
        z = _sigmoid(A[n, :d] + u[:d])
        r = _sigmoid(A[n, d:2 * d] + u[d:])
        hc = np.tanh(A[n, 2 * d:] + Uc @ (r * h))
        h = (1.0 - z) * h + z * hc
        Z[n], R[n], HC[n], H[n] = z, r, hc, h
    return EncodeTrace(X, H_prev, Z, R, HC, H)


def lookup(items: Sequence[int], embeddings: np.ndarray) -> np.ndarray:
    idx = np.asarray(items, dtype=np.int64)
    if idx.size and (idx.min() < 1 or idx.max() >= embeddings.shape[0]):
        raise CatalogError(f"item index outside catalog 1..{embeddings.shape[0] - 1}: {list(items)}")
    return embeddings[idx]


def gru_encode(items: Sequence[int], block: GRUBlock, embeddings: np.ndarray) -> tuple[EncodeTrace, np.ndarray]:
    """Encode a session; returns the trace and the session interest ``h_|s|``."""
    if len(items) == 0:
        raise PreconditionError("cannot encode an empty session")
    trace = gru_encode_inputs(lookup(items, embeddings), block)
    trace.items = np.asarray(items, dtype=np.int64)
    return trace, trace.final


def gru_states_batch(X: np.ndarray, block: GRUBlock) -> np.ndarray:
    """Hidden states for a batch of equal-length sequences, ``X`` of shape (B, T, d_in).

    Forward only; used to embed many candidate sessions at once.
    """
    B, T, _ = X.shape
    d = block.d
    A = X @ block.W.T + block.b
    Uzr, Uc = block.U[:2 * d], block.U[2 * d:]
    H = np.empty((B, T, d))
    h = np.zeros((B, d))
    for n in range(T):
        u = h @ Uzr.T
        z = _sigmoid(A[:, n, :d] + u[:, :d])
        r = _sigmoid(A[:, n, d:2 * d] + u[:, d:])
        hc = np.tanh(A[:, n, 2 * d:] + (r * h) @ Uc.T)
        h = (1.0 - z) * h + z * hc
        H[:, n] = h
    return H


def gru_backward(trace: EncodeTrace, dH: np.ndarray, block: GRUBlock, grads: GRUBlock) -> np.ndarray:
    """Exact BPTT given upstream gradients on every hidden state.

    Accumulates into ``grads`` and returns the gradient on the inputs ``X``.
    """
    if dH.shape != trace.H.shape:
        raise ShapeError(f"upstream gradient {dH.shape} does not match trace {trace.H.shape}")
    T, d = trace.H.shape
    Uzr, Uc = block.U[:2 * d], block.U[2 * d:]
    DA = np.empty((T, 3 * d))
    carry = np.zeros(d)
    for n in range(T - 1, -1, -1):
        dh = dH[n] + carry
        z, r, hc, hp = trace.Z[n], trace.R[n], trace.HC[n], trace.H_prev[n]
        dz = dh * (hc - hp)
        dac = dh * z * (1.0 - hc * hc)
        drh = Uc.T @ dac
        dar = drh * hp * r * (1.0 - r)
        daz = dz * z * (1.0 - z)
        DA[n, :d], DA[n, d:2 * d], DA[n, 2 * d:] = daz, dar, dac
        carry = dh * (1.0 - z) + drh * r + Uzr.T @ DA[n, :2 * d]
    grads.W += DA.T @ trace.X
    grads.b += DA.sum(axis=0)
    grads.U[:2 * d] += DA[:, :2 * d].T @ trace.H_prev
    grads.U[2 * d:] += DA[:, 2 * d:].T @ (trace.R * trace.H_prev)
    return DA @ block.W


def scatter_embedding_grad(grad_table: np.ndarray, items: np.ndarray, dX: np.ndarray) -> None:
    np.add.at(grad_table, items, dX)


def long_term_encode(history: Sequence[np.ndarray] | np.ndarray, block: GRUBlock,
                     max_history: int | None = None) -> tuple[np.ndarray, EncodeTrace | None]:
    """Second-level GRU over the chronological per-session interests.

    Returns ``(interest, trace)``; an empty history gives the zero vector and
    no trace. Only the most recent ``max_history`` entries are used.
    """
    d = block.d
    if len(history) == 0:
        return np.zeros(d), None
    X = np.asarray(history, dtype=np.float64).reshape(-1, block.W.shape[1])
    if max_history is not None:
        X = X[-max_history:]
    trace = gru_encode_inputs(X, block)
    return trace.final.copy(), trace
