"""Frame autoencoder pieces and volumetric compositing.

The frontend cuts frames into non-overlapping patches and embeds them; the
decoder broadcasts each slot over the pixel grid, adds a projected 2D
coordinate and runs a shared per-position MLP emitting RGB plus an alpha
logit.  Alpha logits are softmaxed across slots and used as mixing weights.

``composite_slots`` / ``render_ray`` are the density-mixing and ray
integration equations as plain numpy functions.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import MLP, LayerNorm, Linear, Module, uniform_init
from .numerics import Param, Tensor, relu, softmax
from .psb_encoder import PSBConfig, PSBEncoder
from .recurrent import RecurrentConfig, RecurrentEncoder


def patchify(frames: np.ndarray, patch: int) -> np.ndarray:
    """[*, C, H, W] -> [*, L, C*P*P], patches in row-major grid order."""
    *lead, C, H, W = frames.shape
    if H % patch or W % patch:
        raise ValueError(f"frame {H}x{W} not divisible by patch size {patch}")
    gh, gw = H // patch, W // patch
    x = frames.reshape(*lead, C, gh, patch, gw, patch)
    nd = len(lead)
    x = x.transpose(*range(nd), nd + 1, nd + 3, nd, nd + 2, nd + 4)
    return x.reshape(*lead, gh * gw, C * patch * patch)


def grid_coords(rows: int, cols: int) -> np.ndarray:
    """Cell-center coordinates in [-1, 1], shape [rows*cols, 2] as (y, x)."""
    ys = (np.arange(rows) + 0.5) / rows * 2 - 1
    xs = (np.arange(cols) + 0.5) / cols * 2 - 1
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([yy.ravel(), xx.ravel()], axis=-1)


class PatchEmbed(Module):
    def __init__(self, rng: np.random.Generator, patch: int, dim: int, hidden: int,
                 channels: int = 3):
        self.patch = patch
        self.proj = Linear(rng, channels * patch * patch, dim)
        self.pos = Param(uniform_init(rng, 2, (2, dim)))
        self.ln = LayerNorm(dim)
        self.mlp = MLP(rng, dim, hidden, dim, act="relu")

    def __call__(self, frames) -> Tensor:
        """Frames [*, C, H, W] -> features [*, L, D]."""
        data = frames.data if isinstance(frames, Tensor) else np.asarray(frames)
        dtype = self.pos.dtype
        H, W = data.shape[-2:]
        patches = Tensor(patchify(data, self.patch).astype(dtype))
        coords = Tensor(grid_coords(H // self.patch, W // self.patch).astype(dtype))
        x = self.proj(patches) + coords @ self.pos
        return self.mlp(self.ln(x))


@dataclass
class DecoderOutput:
    """Decoder results in pixel-last layout ``[*, N, H*W, ...]``.

    ``mixture`` is [*, 3, H, W] and ``masks`` [*, N, H, W]; the per-slot RGB
    and alpha logits are exposed in channel-first layout on request.
    """

    rgb: Tensor            # [*, N, HW, 3]
    logits: Tensor         # [*, N, HW, 1]
    mix_pixels: Tensor     # [*, HW, 3]
    mask_pixels: Tensor    # [*, N, HW, 1]
    height: int
    width: int

    @property
    def mixture(self) -> Tensor:
        *lead, hw, c = self.mix_pixels.shape
        return self.mix_pixels.swapaxes(-1, -2).reshape(tuple(lead) + (c, self.height, self.width))

    @property
    def masks(self) -> Tensor:
        *lead, n, hw, _ = self.mask_pixels.shape
        return self.mask_pixels.reshape(tuple(lead) + (n, self.height, self.width))

    @property
    def rgb_per_slot(self) -> np.ndarray:
        *lead, n, hw, c = self.rgb.shape
        x = np.swapaxes(self.rgb.data, -1, -2)
        return x.reshape(tuple(lead) + (n, c, self.height, self.width))

    @property
    def alpha_logits(self) -> np.ndarray:
        *lead, n, hw, _ = self.logits.shape
        return self.logits.data.reshape(tuple(lead) + (n, 1, self.height, self.width))


class BroadcastDecoder(Module):
    """Spatial broadcast decoder with a per-position MLP.

    The first layer of the MLP is applied to (slot + position encoding); it
    is computed as W*slot + W*pos so the broadcast grid is never built
    before the first nonlinearity.
    """

    def __init__(self, rng: np.random.Generator, dim: int, hidden: int, height: int, width: int):
        self.height = height
        self.width = width
        self.ln = LayerNorm(dim)
        self.pos = Linear(rng, 2, dim)
        self.fc1 = Linear(rng, dim, hidden)
        self.fc2 = Linear(rng, hidden, hidden)
        self.out = Linear(rng, hidden, 4)

    def __call__(self, slots: Tensor, height: int | None = None,
                 width: int | None = None) -> DecoderOutput:
        H = height or self.height
        W = width or self.width
        *lead, N, D = slots.shape
        dtype = self.fc1.w.dtype
        pe = self.pos(Tensor(grid_coords(H, W).astype(dtype)))          # [HW, D]
        per_slot = (self.ln(slots) @ self.fc1.w).reshape(tuple(lead) + (N, 1, -1))
        per_pos = pe @ self.fc1.w + self.fc1.b                            # [HW, hid]
        h = relu(per_slot + per_pos)
        h = relu(self.fc2(h))
        o = self.out(h)                                                   # [*, N, HW, 4]
        rgb = o[..., :3]
        logits = o[..., 3:]
        masks = softmax(logits, axis=-3)
        mix = (masks * rgb).sum(axis=-3)
        return DecoderOutput(rgb, logits, mix, masks, H, W)


def recon_loss(pred, target) -> Tensor:
    """Mean squared error over all elements."""
    if not isinstance(pred, Tensor):
        pred = Tensor(pred)
    target = target.data if isinstance(target, Tensor) else np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    d = pred - target.astype(pred.dtype)
    return (d * d).mean()


@dataclass
class ModelConfig:
    encoder: str = "psb"
    height: int = 32
    width: int = 32
    channels: int = 3
    patch: int = 4
    embed_hidden: int = 192
    decoder_hidden: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.encoder not in ("psb", "recurrent"):
            raise ValueError("encoder must be 'psb' or 'recurrent'")


class AutoEncoder(Module):
    """patch embed -> slot encoder -> broadcast decoder."""

    def __init__(self, cfg: ModelConfig, enc_cfg: PSBConfig | RecurrentConfig):
        rng = np.random.default_rng(cfg.seed)
        self.cfg = cfg
        self.enc_cfg = enc_cfg
        D = enc_cfg.dim
        self.embed = PatchEmbed(rng, cfg.patch, D, cfg.embed_hidden, cfg.channels)
        if cfg.encoder == "psb":
            self.psb = PSBEncoder(enc_cfg, rng)
        else:
            self.rec = RecurrentEncoder(enc_cfg, rng)
        self.dec = BroadcastDecoder(rng, D, cfg.decoder_hidden, cfg.height, cfg.width)
        self.assign_names()

    @property
    def encoder(self):
        return self.psb if self.cfg.encoder == "psb" else self.rec

    def encode(self, frames, seed: int = 0) -> Tensor:
        """Frames [*, T, C, H, W] -> slots [*, T, N, D]."""
        return self.encoder(self.embed(frames), seed=seed)

    def decode(self, slots: Tensor) -> DecoderOutput:
        return self.dec(slots)

    def forward(self, frames, seed: int = 0) -> tuple[Tensor, DecoderOutput]:
        slots = self.encode(frames, seed)
        return slots, self.decode(slots)

    def loss(self, frames, seed: int = 0) -> Tensor:
        _, out = self.forward(frames, seed)
        frames = np.asarray(frames.data if isinstance(frames, Tensor) else frames)
        *lead, C, H, W = frames.shape
        target = np.swapaxes(frames.reshape(*lead, C, H * W), -1, -2)
        return recon_loss(out.mix_pixels, target)


# sine-cosine scalar features and volumetric compositing

def vectorize_scalar(s, dim: int = 16, max_value: float = 1.0) -> np.ndarray:
    """Interleaved [sin(g_i s), cos(g_i s)], g_i = pi * 2**(i-1) / max_value."""
    if dim % 2:
        raise ValueError("dim must be even")
    s = np.asarray(s, dtype=np.float64)
    gamma = np.pi * 2.0 ** np.arange(dim // 2) / max_value
    ang = s[..., None] * gamma
    out = np.empty(s.shape + (dim,))
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


def composite_slots(sigmas, colors, sigma_static=None, color_static=None):
    """Density-weighted color mixture of N sources (plus an optional static field).

    sigmas [..., N], colors [..., N, 3] -> (sigma [...], color [..., 3]).
    Where the total density is zero the color is defined as zero.
    """
    sigmas = np.asarray(sigmas, dtype=np.float64)
    colors = np.asarray(colors, dtype=np.float64)
    if (sigmas < 0).any():
        raise ValueError("negative density")
    total = sigmas.sum(axis=-1)
    weighted = (colors * sigmas[..., None]).sum(axis=-2)
    if sigma_static is not None:
        sigma_static = np.asarray(sigma_static, dtype=np.float64)
        if (sigma_static < 0).any():
            raise ValueError("negative density")
        total = total + sigma_static
        weighted = weighted + np.asarray(color_static, dtype=np.float64) * sigma_static[..., None]
    safe = np.where(total > 0, total, 1.0)
    color = np.where(total[..., None] > 0, weighted / safe[..., None], 0.0)
    return total, color


@dataclass
class RaySegmentBatch:
    """Samples along rays; leading dims are rays, S samples, N sources.

    densities [..., S, N], colors [..., S, N, 3], lengths [..., S];
    optional static_density [..., S], static_color [..., S, 3],
    sky_color [..., 3], shadow [..., S, N], static_shadow [..., S].
    """

    densities: np.ndarray
    colors: np.ndarray
    lengths: np.ndarray
    static_density: np.ndarray | None = None
    static_color: np.ndarray | None = None
    sky_color: np.ndarray | None = None
    shadow: np.ndarray | None = None
    static_shadow: np.ndarray | None = None

    def __post_init__(self):
        if (np.asarray(self.densities) < 0).any():
            raise ValueError("densities must be nonnegative")
        if (np.asarray(self.lengths) <= 0).any():
            raise ValueError("segment lengths must be positive")


def render_ray(batch: RaySegmentBatch) -> np.ndarray:
    """Sum_i T_i a_i c_i (+ T_{S+1} c_sky), a_i = 1 - exp(-sigma_i len_i)."""
    sigma, color = composite_slots(batch.densities, batch.colors,
                                   batch.static_density, batch.static_color)
    if batch.shadow is not None or batch.static_shadow is not None:
        rho = np.ones(sigma.shape)
        if batch.static_shadow is not None:
            rho = rho * np.asarray(batch.static_shadow, dtype=np.float64)
        if batch.shadow is not None:
            rho = rho * np.prod(np.asarray(batch.shadow, dtype=np.float64), axis=-1)
        color = color * rho[..., None]
    alpha = 1.0 - np.exp(-sigma * np.asarray(batch.lengths, dtype=np.float64))
    survive = np.cumprod(1.0 - alpha, axis=-1)
    trans = np.concatenate([np.ones(sigma.shape[:-1] + (1,)), survive[..., :-1]], axis=-1)
    out = (trans[..., None] * alpha[..., None] * color).sum(axis=-2)
    if batch.sky_color is not None:
        out = out + survive[..., -1:] * np.asarray(batch.sky_color, dtype=np.float64)
    return out
