"""Temporally parallel slot encoder.

Slots for all T time-steps are refined together by a stack of blocks, each
made of four residual sub-steps: slots attend to features (inverted
attention, competition among the N slots of one time-step), slots with the
same index attend across time, slots of one time-step attend to each other,
and a per-slot MLP.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import (MultiHeadAttention, RelPosBias, causal_mask,
                        expand_time_mask, grouped_attention)
from .layers import MLP, LayerNorm, Module
from .numerics import Param, Tensor, broadcast_to, exp, stack

INIT_MODES = ("learned", "random")
INTERACTIONS = ("decoupled", "joint")


@dataclass
class PSBConfig:
    num_layers: int = 3
    num_slots: int = 4
    dim: int = 192
    ca_heads: int = 1
    time_heads: int = 4
    obj_heads: int = 4
    mlp_hidden: int = 768
    init_mode: str = "learned"
    causal: bool = True
    inverted: bool = True
    interaction: str = "decoupled"
    t_max: int = 6
    window: int = 6
    zero_init_residual: bool = True

    def __post_init__(self):
        if self.init_mode not in INIT_MODES:
            raise ValueError(f"init_mode must be one of {INIT_MODES}")
        if self.interaction not in INTERACTIONS:
            raise ValueError(f"interaction must be one of {INTERACTIONS}")
        for heads in (self.ca_heads, self.time_heads, self.obj_heads):
            if self.dim % heads:
                raise ValueError(f"dim {self.dim} not divisible by {heads} heads")


def attention_elements(num_slots: int, T: int, interaction: str) -> int:
    """Slot-slot attention-matrix entries per layer."""
    if interaction == "joint":
        return (num_slots * T) ** 2
    return num_slots * T * T + T * num_slots * num_slots


class SlotInit(Module):
    """Learned per-index vectors, or one Gaussian draw per episode.

    The random mode stores the standard deviation as its log so it stays
    positive.  Either way the N initial slots are shared across time.
    """

    def __init__(self, rng: np.random.Generator, num_slots: int, dim: int, mode: str):
        self.mode = mode
        self.num_slots = num_slots
        if mode == "learned":
            self.slots = Param(rng.standard_normal((num_slots, dim)))
        else:
            self.mean = Param(rng.standard_normal(dim))
            self.log_std = Param(np.zeros(dim))

    def sample(self, batch_shape: tuple[int, ...], seed: int = 0) -> Tensor:
        """Initial slots shaped ``[*batch_shape, N, D]``."""
        if self.mode == "learned":
            n, d = self.slots.shape
            return broadcast_to(self.slots, tuple(batch_shape) + (n, d))
        d = self.mean.shape[0]
        noise = np.random.default_rng(seed).standard_normal(tuple(batch_shape) + (self.num_slots, d))
        return self.mean + exp(self.log_std) * noise.astype(self.mean.dtype)


def broadcast_over_time(slots0: Tensor, target_lead: tuple[int, ...]) -> Tensor:
    """[*, N, D] -> [*target_lead, N, D] with a new time axis before N."""
    n, d = slots0.shape[-2:]
    s = slots0.reshape(slots0.shape[:-2] + (1, n, d))
    return broadcast_to(s, tuple(target_lead) + (n, d))


class PSBBlock(Module):
    def __init__(self, rng: np.random.Generator, cfg: PSBConfig):
        self.cfg = cfg
        D, zero = cfg.dim, cfg.zero_init_residual
        self.ln_ca_slots = LayerNorm(D)
        self.ln_ca_feats = LayerNorm(D)
        self.ca = MultiHeadAttention(rng, D, cfg.ca_heads, zero_out=zero)
        self.ca_bias = RelPosBias(cfg.ca_heads, cfg.t_max)
        if cfg.interaction == "decoupled":
            self.ln_time = LayerNorm(D)
            self.sa_time = MultiHeadAttention(rng, D, cfg.time_heads, zero_out=zero)
            self.time_bias = RelPosBias(cfg.time_heads, cfg.t_max)
            self.ln_obj = LayerNorm(D)
            self.sa_obj = MultiHeadAttention(rng, D, cfg.obj_heads, zero_out=zero)
        else:
            self.ln_joint = LayerNorm(D)
            self.sa_joint = MultiHeadAttention(rng, D, cfg.time_heads, zero_out=zero)
            self.joint_bias = RelPosBias(cfg.time_heads, cfg.t_max)
        self.ln_mlp = LayerNorm(D)
        self.mlp = MLP(rng, D, cfg.mlp_hidden, D, act="gelu", zero_out=zero)

    def _alpha(self, T: int) -> np.ndarray:
        return causal_mask(T) if self.cfg.causal else np.ones((T, T), dtype=bool)

    def cross_attend(self, s: Tensor, e: Tensor) -> Tensor:
        """Sub-step 1.  Each time-step's N slots form one competition group.

        Queries are the T*N slots and keys the T*L features of every
        time-step, masked by alpha.
        """
        *lead, T, N, D = s.shape
        L = e.shape[-2]
        h = self.ca.heads
        xq = self.ln_ca_slots(s).reshape(tuple(lead) + (T * N, D))
        xkv = self.ln_ca_feats(e).reshape(tuple(e.shape[:-3]) + (T * L, D))
        q = self.ca.split(xq @ self.ca.w_q)              # [*, h, TN, dh]
        k, v = self.ca.project_kv(xkv)                   # [*, h, TL, dh]
        mask = expand_time_mask(self._alpha(T), 1, L)[:, None, None, :]
        key_time = np.repeat(np.arange(T), L)
        bias = self.ca_bias.lookup(np.arange(T), key_time)  # [h, T, TL]
        bias = bias.transpose(1, 0, 2).reshape(T, h, 1, T * L)
        out = grouped_attention(q, k, v, T, mask=mask, bias=bias, inverted=self.cfg.inverted)
        out = self.ca.merge(out) @ self.ca.w_o + self.ca.b_o
        return out.reshape(tuple(lead) + (T, N, D))

    def time_attend(self, s: Tensor) -> Tensor:
        T = s.shape[-3]
        x = self.ln_time(s).swapaxes(-3, -2)             # [*, N, T, D]
        out = self.sa_time(x, mask=self._alpha(T), bias=self.time_bias.lookup(T, T))
        return out.swapaxes(-3, -2)

    def object_attend(self, s: Tensor) -> Tensor:
        return self.sa_obj(self.ln_obj(s))

    def joint_attend(self, s: Tensor) -> Tensor:
        """Ablation: one self-attention over all T*N slot tokens, block-causal."""
        *lead, T, N, D = s.shape
        x = self.ln_joint(s).reshape(tuple(lead) + (T * N, D))
        mask = expand_time_mask(self._alpha(T), N, N)
        tok_time = np.repeat(np.arange(T), N)
        out = self.sa_joint(x, mask=mask, bias=self.joint_bias.lookup(tok_time, tok_time))
        return out.reshape(tuple(lead) + (T, N, D))

    def __call__(self, s: Tensor, e: Tensor) -> Tensor:
        s = s + self.cross_attend(s, e)
        if self.cfg.interaction == "decoupled":
            s = s + self.time_attend(s)
            s = s + self.object_attend(s)
        else:
            s = s + self.joint_attend(s)
        return s + self.mlp(self.ln_mlp(s))


class PSBEncoder(Module):
    def __init__(self, cfg: PSBConfig, rng: np.random.Generator | int = 0):
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        self.cfg = cfg
        self.init = SlotInit(rng, cfg.num_slots, cfg.dim, cfg.init_mode)
        self.block = [PSBBlock(rng, cfg) for _ in range(cfg.num_layers)]

    def init_slots(self, e_shape: tuple[int, ...], seed: int = 0) -> Tensor:
        """Initial SlotState for features shaped [*, T, L, D]."""
        slots0 = self.init.sample(tuple(e_shape[:-3]), seed)
        return broadcast_over_time(slots0, tuple(e_shape[:-2]))

    def __call__(self, e: Tensor, seed: int = 0, slots0: Tensor | None = None) -> Tensor:
        """Encode features [*, T, L, D] into slots [*, T, N, D]."""
        T = e.shape[-3]
        if T > self.cfg.t_max:
            raise ValueError(f"sequence length {T} exceeds t_max={self.cfg.t_max}")
        if slots0 is None:
            s = self.init_slots(e.shape, seed)
        else:
            s = broadcast_over_time(slots0, tuple(e.shape[:-2]))
        for blk in self.block:
            s = blk(s, e)
        return s

    encode = __call__

    def encode_sliding(self, e: Tensor, window: int | None = None, seed: int = 0) -> Tensor:
        """Slots at t come from the last step of encoding frames t-W+1..t."""
        if not self.cfg.causal:
            raise ValueError("sliding-window encoding requires a causal encoder")
        W = window or self.cfg.window
        T = e.shape[-3]
        slots0 = self.init.sample(tuple(e.shape[:-3]), seed)
        outs = [self(e[..., :t + 1, :, :], slots0=slots0)[..., -1, :, :]
                for t in range(min(W - 1, T))]
        if T >= W:
            wins = stack([e[..., t - W + 1:t + 1, :, :] for t in range(W - 1, T)], axis=-4)
            s0 = slots0.reshape(slots0.shape[:-2] + (1,) + slots0.shape[-2:])
            last = self(wins, slots0=s0)[..., -1, :, :]   # [*, T-W+1, N, D]
            outs.extend(last[..., i, :, :] for i in range(T - W + 1))
        return stack(outs, axis=-3)
