"""GRU-attention feature extractor.

Each hidden state is scored by its inner product with the last hidden
state; the softmax of those scores weights a sum of the hidden states.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import PreconditionError
from .numerics import softmax
from .recurrent import EncodeTrace, GRUBlock, gru_backward, gru_encode, scatter_embedding_grad


@dataclass
class AttentionOutput:
    weights: np.ndarray   # post-softmax, one per step
    pooled: np.ndarray    # E_s
    trace: EncodeTrace | None = None


def attention_pool(H: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(weights, pooled)`` for hidden states ``H`` of shape (T, d)."""
    raw = H @ H[-1]
    w = softmax(raw)
    return w, w @ H


def attention_pool_batch(H: np.ndarray) -> np.ndarray:
    """Pooled vectors for a batch of equal-length state sequences (B, T, d)."""
    raw = np.einsum("btd,bd->bt", H, H[:, -1])
    w = softmax(raw)
    return np.einsum("bt,btd->bd", w, H)


def attention_pool_backward(H: np.ndarray, weights: np.ndarray, d_pooled: np.ndarray) -> np.ndarray:
    """Gradient on ``H`` given the gradient on the pooled vector."""
    dH = np.outer(weights, d_pooled)
    dw = H @ d_pooled
    draw = weights * (dw - weights @ dw)
    dH += np.outer(draw, H[-1])
    dH[-1] += draw @ H
    return dH


def gafe_extract(items: Sequence[int], block: GRUBlock, embeddings: np.ndarray) -> AttentionOutput:
    if len(items) == 0:
        raise PreconditionError("GAFE needs a non-empty session")
    trace, _ = gru_encode(items, block, embeddings)
    w, pooled = attention_pool(trace.H)
    return AttentionOutput(w, pooled, trace)


def gafe_backward(att: AttentionOutput, d_pooled: np.ndarray, block: GRUBlock, grads: GRUBlock,
                  embedding_grads: np.ndarray) -> None:
    """Backpropagate through pooling, softmax, the inner products and the GRU."""
    trace = att.trace
    if trace is None or trace.items is None or len(att.weights) != len(trace):
        raise PreconditionError("gafe_backward needs the trace from gafe_extract")
    dH = attention_pool_backward(trace.H, att.weights, d_pooled)
    dX = gru_backward(trace, dH, block, grads)
    scatter_embedding_grad(embedding_grads, trace.items, dX)
