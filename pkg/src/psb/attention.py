"""Attention kernels: dot-product, inverted (slot-competitive), masks and
relative positional bias.

All kernels take per-head arrays shaped ``[..., h, Nq, d]`` / ``[..., h, Nk, d]``
with arbitrary broadcastable leading dimensions.  Masks are boolean arrays
broadcastable to the logits ``[..., h, Nq, Nk]`` (True = visible); biases are
Tensors broadcastable to the same shape.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import Module, uniform_init
from .numerics import Param, Tensor, softmax, take

RENORM_FLOOR = 1e-30


class StarvedSlotError(ValueError):
    """A query row received (numerically) no attention mass."""


@dataclass
class AttentionConfig:
    dim: int
    heads: int = 1
    inverted: bool = False
    causal: bool = False
    use_rel_bias: bool = False

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")


def causal_mask(T: int) -> np.ndarray:
    """alpha[tq, tk] is True iff tk <= tq."""
    return np.tril(np.ones((T, T), dtype=bool))


def expand_time_mask(alpha: np.ndarray, rows_per_t: int, cols_per_t: int) -> np.ndarray:
    """Block-broadcast a T x T mask to (T*rows) x (T*cols) token pairs."""
    alpha = np.asarray(alpha, dtype=bool)
    return np.repeat(np.repeat(alpha, rows_per_t, axis=0), cols_per_t, axis=1)


def offset_index(q_pos, k_pos, t_max: int) -> np.ndarray:
    """Table column for each (query, key) time pair, offsets clamped to +-(t_max-1)."""
    q_pos = np.asarray(q_pos)
    k_pos = np.asarray(k_pos)
    off = np.clip(q_pos[:, None] - k_pos[None, :], -(t_max - 1), t_max - 1)
    return off + (t_max - 1)


class RelPosBias(Module):
    """Per-head learned additive logits indexed by the time offset tq - tk."""

    def __init__(self, heads: int, t_max: int):
        self.t_max = t_max
        self.table = Param(np.zeros((heads, 2 * t_max - 1)))

    @property
    def heads(self) -> int:
        return self.table.shape[0]

    def lookup(self, q_pos, k_pos) -> Tensor:
        if np.isscalar(q_pos):
            q_pos = np.arange(q_pos)
        if np.isscalar(k_pos):
            k_pos = np.arange(k_pos)
        return take(self.table, offset_index(q_pos, k_pos, self.t_max), axis=1)


def rel_bias_lookup(bias: RelPosBias, Tq: int, Tk: int, q_start: int = 0,
                    k_start: int = 0) -> Tensor:
    return bias.lookup(np.arange(Tq) + q_start, np.arange(Tk) + k_start)


def _logits(q: Tensor, k: Tensor, bias: Tensor | None) -> Tensor:
    scale = 1.0 / np.sqrt(q.shape[-1])
    logits = (q @ k.swapaxes(-1, -2)) * scale
    if bias is not None:
        logits = logits + bias
    return logits


def dot_weights(q: Tensor, k: Tensor, mask=None, bias: Tensor | None = None) -> Tensor:
    return softmax(_logits(q, k, bias), axis=-1, mask=mask)


def dot_attention(q: Tensor, k: Tensor, v: Tensor, mask=None,
                  bias: Tensor | None = None) -> Tensor:
    """Softmax over keys for each query.  A fully masked query row raises."""
    return dot_weights(q, k, mask, bias) @ v


def inverted_weights(q: Tensor, k: Tensor, mask=None,
                     bias: Tensor | None = None) -> tuple[Tensor, Tensor]:
    """Return (column softmax over heads x queries, row-renormalized weights).

    Key columns with no visible query in the group get zero weight; a query
    row whose total mass falls below ``RENORM_FLOOR`` raises StarvedSlotError.
    """
    return _inverted_from_logits(_logits(q, k, bias), mask)


def _inverted_from_logits(logits: Tensor, mask) -> tuple[Tensor, Tensor]:
    col = softmax(logits, axis=(-3, -2), mask=mask, empty="zero")
    den = col.sum(axis=-1, keepdims=True)
    if den.data.size and den.data.min() < RENORM_FLOOR:
        raise StarvedSlotError("query row has no attention mass to renormalize")
    return col, col / den


def inverted_attention(q: Tensor, k: Tensor, v: Tensor, mask=None,
                       bias: Tensor | None = None) -> Tensor:
    """Queries (and heads) compete for each key, then rows are renormalized."""
    _, w = inverted_weights(q, k, mask, bias)
    return w @ v


def grouped_attention(q: Tensor, k: Tensor, v: Tensor, groups: int, mask=None,
                      bias: Tensor | None = None, inverted: bool = True) -> Tensor:
    """Attention whose queries fall into ``groups`` consecutive equal blocks.

    q is [*, h, G*n, d]; k and v are [*, h, K, d] and shared by every group.
    ``mask`` and ``bias`` broadcast to the grouped logits [*, G, h, n, K].
    Inverted weights compete over (heads, queries) inside one group only.
    The value product runs on the flat [G*n, K] weights so the shared keys
    and values are never broadcast per group.
    """
    *lead, h, rows, d = q.shape
    n = rows // groups
    K = k.shape[-2]
    logits = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(d))
    logits = logits.reshape(tuple(lead) + (h, groups, n, K)).swapaxes(-4, -3)
    if bias is not None:
        logits = logits + bias
    if inverted:
        _, w = _inverted_from_logits(logits, mask)
    else:
        w = softmax(logits, axis=-1, mask=mask)
    w = w.swapaxes(-4, -3).reshape(tuple(lead) + (h, rows, K))
    return w @ v


class MultiHeadAttention(Module):
    """Projections around the attention kernels.

    W_Q, W_K, W_V are bias-free; W_O carries a bias.  ``zero_out`` starts
    W_O at zero so a residual branch begins as the identity.
    """

    def __init__(self, rng: np.random.Generator, dim: int, heads: int, zero_out: bool = False):
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.w_q = Param(uniform_init(rng, dim, (dim, dim)))
        self.w_k = Param(uniform_init(rng, dim, (dim, dim)))
        self.w_v = Param(uniform_init(rng, dim, (dim, dim)))
        self.w_o = Param(np.zeros((dim, dim)) if zero_out else uniform_init(rng, dim, (dim, dim)))
        self.b_o = Param(np.zeros(dim))

    def split(self, x: Tensor) -> Tensor:
        *lead, n, d = x.shape
        return x.reshape(*lead, n, self.heads, d // self.heads).swapaxes(-2, -3)

    def merge(self, x: Tensor) -> Tensor:
        *lead, h, n, dh = x.shape
        return x.swapaxes(-2, -3).reshape(*lead, n, h * dh)

    def project_kv(self, xkv: Tensor) -> tuple[Tensor, Tensor]:
        return self.split(xkv @ self.w_k), self.split(xkv @ self.w_v)

    def __call__(self, xq: Tensor, xkv: Tensor | None = None, mask=None,
                 bias: Tensor | None = None, inverted: bool = False) -> Tensor:
        if xkv is None:
            xkv = xq
        q = self.split(xq @ self.w_q)
        k, v = self.project_kv(xkv)
        kernel = inverted_attention if inverted else dot_attention
        out = kernel(q, k, v, mask=mask, bias=bias)
        return self.merge(out) @ self.w_o + self.b_o
