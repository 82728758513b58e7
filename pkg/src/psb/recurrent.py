"""Recurrent slot-attention encoder used as the sequential baseline.

Per frame: a few rounds of inverted attention from the previous slots onto
that frame's features, a GRU update per slot and a residual MLP.  There is
no predictor between frames.  This is a controlled stand-in for SAVi-style
encoders, not a reproduction of one.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import MultiHeadAttention, inverted_attention
from .layers import MLP, LayerNorm, Module, uniform_init
from .numerics import Param, Tensor, sigmoid, stack, tanh
from .psb_encoder import SlotInit


@dataclass
class RecurrentConfig:
    num_slots: int = 4
    dim: int = 192
    iterations: int = 2
    mlp_hidden: int = 768
    heads: int = 1
    init_mode: str = "learned"

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")


class GRUCell(Module):
    """h' = (1 - z) * h + z * tanh(x W_n + (r * h) U_n + b_n)."""

    def __init__(self, rng: np.random.Generator, dim: int):
        self.dim = dim
        self.w_x = Param(uniform_init(rng, dim, (dim, 3 * dim)))
        self.b_x = Param(np.zeros(3 * dim))
        self.u_zr = Param(uniform_init(rng, dim, (dim, 2 * dim)))
        self.u_n = Param(uniform_init(rng, dim, (dim, dim)))

    def __call__(self, h: Tensor, x: Tensor) -> Tensor:
        D = self.dim
        xs = x @ self.w_x + self.b_x
        hs = h @ self.u_zr
        z = sigmoid(xs[..., :D] + hs[..., :D])
        r = sigmoid(xs[..., D:2 * D] + hs[..., D:])
        cand = tanh(xs[..., 2 * D:] + (r * h) @ self.u_n)
        return (1.0 - z) * h + z * cand


class RecurrentEncoder(Module):
    def __init__(self, cfg: RecurrentConfig, rng: np.random.Generator | int = 0):
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        self.cfg = cfg
        D = cfg.dim
        self.init = SlotInit(rng, cfg.num_slots, D, cfg.init_mode)
        self.ln_slots = LayerNorm(D)
        self.ln_feats = LayerNorm(D)
        self.attn = MultiHeadAttention(rng, D, cfg.heads)
        self.gru = GRUCell(rng, D)
        self.ln_mlp = LayerNorm(D)
        self.mlp = MLP(rng, D, cfg.mlp_hidden, D)

    def frame(self, slots: Tensor, e_t: Tensor, iterations: int | None = None) -> Tensor:
        """One frame of slot attention: [*, N, D] x [*, L, D] -> [*, N, D]."""
        iterations = self.cfg.iterations if iterations is None else iterations
        if iterations < 1:
            raise ValueError("iterations must be >= 1")
        kv = self.ln_feats(e_t)
        k, v = self.attn.project_kv(kv)
        for _ in range(iterations):
            q = self.attn.split(self.ln_slots(slots) @ self.attn.w_q)
            readout = self.attn.merge(inverted_attention(q, k, v)) @ self.attn.w_o + self.attn.b_o
            slots = self.gru(slots, readout)
            slots = slots + self.mlp(self.ln_mlp(slots))
        return slots

    def __call__(self, e: Tensor, seed: int = 0, slots0: Tensor | None = None) -> Tensor:
        """Encode features [*, T, L, D] sequentially into slots [*, T, N, D]."""
        slots = self.init.sample(tuple(e.shape[:-3]), seed) if slots0 is None else slots0
        out = []
        for t in range(e.shape[-3]):
            slots = self.frame(slots, e[..., t, :, :])
            out.append(slots)
        return stack(out, axis=-3)

    encode = __call__
