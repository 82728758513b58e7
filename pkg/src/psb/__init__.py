"""Temporally parallel slot encoding on a small numpy autodiff core."""
from .attention import AttentionConfig, MultiHeadAttention, StarvedSlotError, inverted_attention
from .autoenc import AutoEncoder, ModelConfig, composite_slots, render_ray, vectorize_scalar
from .metrics import adjusted_rand_index, fg_ari, grouped_fg_ari, perm_invariant_probe, psnr
from .numerics import GradTape, NonFiniteError, Param, Tensor, grad_check
from .psb_encoder import PSBConfig, PSBEncoder, attention_elements
from .recurrent import RecurrentConfig, RecurrentEncoder

__all__ = [
    "AttentionConfig", "MultiHeadAttention", "StarvedSlotError", "inverted_attention",
    "AutoEncoder", "ModelConfig", "composite_slots", "render_ray", "vectorize_scalar",
    "adjusted_rand_index", "fg_ari", "grouped_fg_ari", "perm_invariant_probe", "psnr",
    "GradTape", "NonFiniteError", "Param", "Tensor", "grad_check",
    "PSBConfig", "PSBEncoder", "attention_elements", "RecurrentConfig", "RecurrentEncoder",
]
__version__ = "0.1.0"
