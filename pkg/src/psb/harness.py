"""Optimizer, learning-rate schedule and the training loop."""
from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autoenc import AutoEncoder, ModelConfig
from .checkpoint import Checkpoint, load_checkpoint, load_into, model_arrays, save_checkpoint
from .layers import LayerNorm, Module
from .numerics import GradTape, NonFiniteError, global_norm
from .psb_encoder import PSBConfig, SlotInit
from .recurrent import RecurrentConfig

log = logging.getLogger(__name__)


@dataclass
class Schedule:
    peak: float = 3e-4
    warmup: int = 500
    half_life: float = 20000.0

    def __post_init__(self):
        if self.peak < 0 or self.warmup < 0 or self.half_life <= 0:
            raise ValueError("schedule values must be positive")


def lr_at(step: int, sched: Schedule) -> float:
    """Linear warmup to the peak, then exponential decay with a half-life."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if step < sched.warmup:
        return sched.peak * step / sched.warmup
    return sched.peak * 2.0 ** (-(step - sched.warmup) / sched.half_life)


@dataclass
class OptimState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 1e-4
    eps: float = 1e-8

    @classmethod
    def create(cls, params: dict, **hyper) -> "OptimState":
        m = {k: np.zeros_like(p.data) for k, p in params.items()}
        v = {k: np.zeros_like(p.data) for k, p in params.items()}
        return cls(m, v, **hyper)


def adamw_update(params: dict, grads: dict, state: OptimState, lr: float,
                 decay: set[str] | None = None) -> None:
    """One AdamW step in place.

    Weight decay multiplies the parameter by (1 - lr*wd) before the moment
    step; ``decay`` restricts it to the named params (default: all).
    """
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        dtype = p.data.dtype
        g = grads.get(name)
        g = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=dtype)
        if state.weight_decay and (decay is None or name in decay):
            p.data = p.data * dtype.type(1.0 - lr * state.weight_decay)
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        p.data = (p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(dtype, copy=False)


def decayed_param_names(model: Module) -> set[str]:
    """Every param except LayerNorm gains/biases and slot-init params."""
    skip = set()
    for mname, mod in model.named_modules():
        if isinstance(mod, (LayerNorm, SlotInit)):
            prefix = f"{mname}." if mname else ""
            skip.update(prefix + n for n, _ in mod.named_params())
    return {n for n, _ in model.named_params() if n not in skip}


@dataclass
class TrainConfig:
    steps: int = 5000
    batch_size: int = 4
    peak_lr: float = 3e-4
    warmup: int = 500
    half_life: float = 20000.0
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 1e-4
    clip_norm: float | None = None
    checkpoint_every: int = 1000
    shards: int = 1
    workers: int = 1
    dtype: str = "float32"
    seed: int = 0
    log_every: int = 100

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or self.shards < 1 or self.workers < 1:
            raise ValueError("steps >= 0, batch_size/shards/workers >= 1 required")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def schedule(self) -> Schedule:
        return Schedule(self.peak_lr, self.warmup, self.half_life)


class TrainingAborted(RuntimeError):
    def __init__(self, step: int, reason: str, snapshot: Path | None = None):
        super().__init__(f"aborted at step {step}: {reason}")
        self.step = step
        self.reason = reason
        self.snapshot = snapshot


@dataclass
class TrainResult:
    model: AutoEncoder
    state: OptimState
    history: list[dict] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)


def build_model(model_cfg: ModelConfig, enc_cfg: PSBConfig | RecurrentConfig,
                dtype: str = "float64") -> AutoEncoder:
    return AutoEncoder(model_cfg, enc_cfg).astype(np.dtype(dtype))


def derive_seed(*keys: int) -> int:
    return int(np.random.SeedSequence(list(keys)).generate_state(1)[0])


def batch_indices(seed: int, step: int, n: int, batch: int) -> np.ndarray:
    rng = np.random.default_rng([seed, step])
    return np.sort(rng.choice(n, size=batch, replace=n < batch))


def compute_grads(model: AutoEncoder, frames: np.ndarray, seed: int = 0, shards: int = 1,
                  workers: int = 1, loss_fn=None) -> tuple[float, dict[str, np.ndarray]]:
    """Mean loss and gradients over a batch split into ``shards`` pieces.

    Each shard runs on its own tape (in a thread when workers > 1); the
    shard results are combined in shard order, so the output depends on the
    shard count but not on the worker count.
    """
    loss_fn = loss_fn or (lambda x, s: model.loss(x, seed=s))
    B = frames.shape[0]
    chunks = [c for c in np.array_split(np.arange(B), min(shards, B)) if c.size]

    def run(i):
        with GradTape() as tape:
            loss = loss_fn(frames[chunks[i]], derive_seed(seed, i))
            return loss.item(), tape.backward(loss, populate=False)

    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, range(len(chunks))))
    else:
        parts = [run(i) for i in range(len(chunks))]
    if len(parts) == 1:
        total, grads = parts[0]
    else:
        total, grads = 0.0, {}
        for c, (l, g) in zip(chunks, parts):
            w = c.size / B
            total += w * l
            for k, v in g.items():
                grads[k] = grads[k] + w * v if k in grads else w * v
    named = dict(model.named_params())
    return total, {k: grads.get(k, np.zeros_like(p.data)) for k, p in named.items()}


def stack_frames(episodes) -> np.ndarray:
    shapes = {ep.frames.shape for ep in episodes}
    if len(shapes) != 1:
        raise ValueError(f"episodes have differing shapes: {sorted(shapes)}")
    return np.stack([ep.frames for ep in episodes])


def _save(path: Path, model, state: OptimState, step: int, config: dict, meta=None) -> Path:
    arrays = dict(model_arrays(model))
    arrays.update({f"opt.m.{k}": v for k, v in state.m.items()})
    arrays.update({f"opt.v.{k}": v for k, v in state.v.items()})
    meta = dict(meta or {})
    meta["optimizer_step"] = state.step
    return save_checkpoint(path, Checkpoint(arrays, config, step, meta))


def train(model_cfg: ModelConfig, enc_cfg: PSBConfig | RecurrentConfig, tcfg: TrainConfig,
          episodes, out_dir=None, resume=None, config: dict | None = None,
          frames: np.ndarray | None = None) -> TrainResult:
    """Train the autoencoder; resumable bitwise from any written checkpoint.

    Batch composition and slot-init noise depend only on (seed, step), so a
    run resumed from step k continues exactly as the uninterrupted run.
    """
    if config is None:
        section = "psb" if model_cfg.encoder == "psb" else "recurrent"
        config = {"model": asdict(model_cfg), section: asdict(enc_cfg), "train": asdict(tcfg)}
    model = build_model(model_cfg, enc_cfg, tcfg.dtype)
    params = dict(model.named_params())
    state = OptimState.create(params, beta1=tcfg.beta1, beta2=tcfg.beta2,
                              weight_decay=tcfg.weight_decay, eps=tcfg.eps)
    decay = decayed_param_names(model)
    start = 0
    if resume is not None:
        ck = load_checkpoint(resume)
        load_into(model, ck.params())
        for which, target in (("m", state.m), ("v", state.v)):
            for k, v in ck.moments(which).items():
                target[k] = v.astype(params[k].dtype)
        state.step = int(ck.meta.get("optimizer_step", ck.step))
        start = ck.step
    if frames is None:
        frames = stack_frames(episodes)
    frames = frames.astype(tcfg.dtype)

    out = Path(out_dir) if out_dir is not None else None
    result = TrainResult(model, state)
    hist_fh = None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        hist_fh = open(out / "history.jsonl", "a" if resume is not None else "w")
        if start == 0:
            result.checkpoints.append(_save(out / "checkpoints" / "step_000000", model, state, 0, config))
    sched = tcfg.schedule
    try:
        for step in range(start, tcfg.steps):
            idx = batch_indices(tcfg.seed, step, len(frames), tcfg.batch_size)
            t0 = time.monotonic()
            try:
                loss, grads = compute_grads(model, frames[idx], derive_seed(tcfg.seed, step),
                                            tcfg.shards, tcfg.workers)
                if not np.isfinite(loss):
                    raise NonFiniteError("loss is not finite")
                gnorm = global_norm(grads.values())
                if not np.isfinite(gnorm):
                    raise NonFiniteError("gradient norm is not finite")
            except NonFiniteError as exc:
                snap = None
                if out is not None:
                    snap = _save(out / "nan_snapshot", model, state, step, config,
                                 {"error": str(exc), "batch": idx.tolist(), "last": result.history[-3:]})
                raise TrainingAborted(step, str(exc), snap) from exc
            if tcfg.clip_norm and gnorm > tcfg.clip_norm:
                scale = tcfg.clip_norm / gnorm
                grads = {k: g * scale for k, g in grads.items()}
            lr = lr_at(step, sched)
            adamw_update(params, grads, state, lr, decay)
            rec = {"step": step, "loss": loss, "grad_norm": gnorm, "lr": lr,
                   "wall_ms": (time.monotonic() - t0) * 1e3}
            result.history.append(rec)
            if hist_fh is not None:
                hist_fh.write(json.dumps(rec) + "\n")
            if tcfg.log_every and (step + 1) % tcfg.log_every == 0:
                log.info("step %d loss %.5f grad_norm %.4f lr %.2e", step + 1, loss, gnorm, lr)
            done = step + 1
            if out is not None and (done % tcfg.checkpoint_every == 0 or done == tcfg.steps):
                result.checkpoints.append(
                    _save(out / "checkpoints" / f"step_{done:06d}", model, state, done, config))
    finally:
        if hist_fh is not None:
            hist_fh.close()
    return result


def predict_masks(model: AutoEncoder, frames: np.ndarray, seed: int = 0,
                  batch: int = 8) -> tuple[np.ndarray, np.ndarray]:
    """Argmax-over-alpha segmentation [E, T, H, W] and reconstructions [E, T, 3, H, W]."""
    dtype = model.dec.fc1.w.dtype
    labels, recon = [], []
    for i in range(0, len(frames), batch):
        _, out = model.forward(frames[i:i + batch].astype(dtype), seed=seed)
        labels.append(np.argmax(out.alpha_logits[..., 0, :, :], axis=-3))
        recon.append(out.mixture.data)
    return np.concatenate(labels), np.concatenate(recon)


def evaluate(model: AutoEncoder, episodes, grouping: str = "per-video", seed: int = 0,
             metrics=("fgari", "psnr")) -> dict:
    from .metrics import grouped_fg_ari, psnr

    frames = stack_frames(episodes)
    labels, recon = predict_masks(model, frames, seed)
    out = {"n_episodes": len(episodes),
           "mse": float(np.mean((recon.astype(np.float64) - frames) ** 2))}
    if "fgari" in metrics:
        scores = [grouped_fg_ari(lab, ep.masks, grouping, skip_empty=True)
                  for lab, ep in zip(labels, episodes)]
        out["fgari"] = float(np.mean(scores))
        out["grouping"] = grouping
    if "psnr" in metrics:
        out["psnr"] = float(np.mean([psnr(r, ep.frames) for r, ep in zip(recon, episodes)]))
    return out
