"""Step-time benchmark and gradient-norm stability probe."""
from __future__ import annotations

import csv
import os
import platform
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autoenc import ModelConfig
from .harness import TrainConfig, compute_grads, train
from .numerics import Tensor, global_norm
from .psb_encoder import PSBConfig, PSBEncoder, attention_elements
from .recurrent import RecurrentConfig, RecurrentEncoder

VARIANTS = ("psb", "psb-joint", "recurrent")


@dataclass
class BenchRow:
    encoder: str
    T: int
    N: int
    L: int
    D: int
    batch: int
    workers: int
    mean_s: float
    std_s: float
    reps: int
    attn_elements_joint: int
    attn_elements_decoupled: int
    peak_grad_norm: float


@dataclass
class BenchReport:
    rows: list[BenchRow] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def to_csv(self, path) -> Path:
        path = Path(path)
        names = list(BenchRow.__dataclass_fields__)
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=names)
            w.writeheader()
            for r in self.rows:
                w.writerow(asdict(r))
        return path

    def mean_time(self, encoder: str, T: int) -> float:
        return next(r.mean_s for r in self.rows if r.encoder == encoder and r.T == T)

    def ratio(self, num: str, den: str, T: int) -> float:
        return self.mean_time(num, T) / self.mean_time(den, T)


def hardware_info() -> dict:
    return {"cpu_count": os.cpu_count(), "machine": platform.machine(),
            "processor": platform.processor(), "python": platform.python_version(),
            "numpy": np.__version__}


def make_encoder(variant: str, D: int, N: int, t_max: int, seed: int = 0,
                 layers: int = 3, mlp_hidden: int | None = None):
    mlp_hidden = mlp_hidden or 4 * D
    if variant == "recurrent":
        enc = RecurrentEncoder(RecurrentConfig(num_slots=N, dim=D, mlp_hidden=mlp_hidden), seed)
    elif variant in ("psb", "psb-joint"):
        heads = 4 if D % 4 == 0 else 1
        cfg = PSBConfig(num_layers=layers, num_slots=N, dim=D, time_heads=heads, obj_heads=heads,
                        mlp_hidden=mlp_hidden, t_max=t_max, window=t_max,
                        interaction="joint" if variant == "psb-joint" else "decoupled")
        enc = PSBEncoder(cfg, seed)
    else:
        raise ValueError(f"unknown encoder variant {variant!r}; choose from {VARIANTS}")
    enc.assign_names()
    return enc


def bench(encoders=("psb", "recurrent"), T_list=(6, 12, 18, 24), reps: int = 5, warmup: int = 2,
          N: int = 4, L: int = 64, D: int = 64, batch: int = 4, workers: int = 1,
          seed: int = 0) -> BenchReport:
    """Time encoder forward+backward on random features [batch, T, L, D].

    The batch is split into ``workers`` shards that run on a thread pool.
    Timing uses a monotonic clock around the full gradient computation.
    """
    if reps < 5 or warmup < 2:
        raise ValueError("bench needs reps >= 5 and warmup >= 2")
    report = BenchReport(meta={**hardware_info(), "workers": workers, "batch": batch})
    t_max = max(T_list)
    for variant in encoders:
        enc = make_encoder(variant, D, N, t_max, seed).astype(np.float32)
        for T in T_list:
            feats = np.random.default_rng([seed, T]).standard_normal((batch, T, L, D)).astype(np.float32)

            def loss_fn(x, s):
                out = enc(Tensor(x), seed=s)
                return (out * out).mean()

            times, norms = [], []
            for i in range(warmup + reps):
                t0 = time.monotonic()
                _, grads = compute_grads(enc, feats, seed, shards=workers, workers=workers,
                                         loss_fn=loss_fn)
                dt = time.monotonic() - t0
                if i >= warmup:
                    times.append(dt)
                    norms.append(global_norm(grads.values()))
            report.rows.append(BenchRow(
                variant, T, N, L, D, batch, workers, statistics.fmean(times),
                statistics.stdev(times), reps, attention_elements(N, T, "joint"),
                attention_elements(N, T, "decoupled"), max(norms)))
    return report


@dataclass
class StabilityRow:
    encoder: str
    T: int
    seed: int
    grad_norms: list[float]

    @property
    def max_over_median(self) -> float:
        return float(np.max(self.grad_norms) / np.median(self.grad_norms))


def stability_probe(episodes, variants=("psb", "recurrent"), steps: int = 2000, seeds=(0,),
                    model_cfg: ModelConfig | None = None, psb_cfg: PSBConfig | None = None,
                    rec_cfg: RecurrentConfig | None = None,
                    train_cfg: TrainConfig | None = None) -> list[StabilityRow]:
    """Train each variant per seed on the same episodes, recording gradient norms.

    The episode length is taken from the data; clipping stays off unless
    ``train_cfg`` enables it.
    """
    model_cfg = model_cfg or ModelConfig()
    T = episodes[0].frames.shape[0]
    psb_cfg = psb_cfg or PSBConfig(t_max=T, window=T)
    rec_cfg = rec_cfg or RecurrentConfig(dim=psb_cfg.dim, num_slots=psb_cfg.num_slots,
                                         mlp_hidden=psb_cfg.mlp_hidden)
    base = train_cfg or TrainConfig()
    rows = []
    for variant in variants:
        for seed in seeds:
            mcfg = ModelConfig(**{**asdict(model_cfg), "encoder": variant, "seed": seed})
            tcfg = TrainConfig(**{**asdict(base), "steps": steps, "seed": seed, "log_every": 0})
            res = train(mcfg, psb_cfg if variant == "psb" else rec_cfg, tcfg, episodes)
            rows.append(StabilityRow(variant, T, seed, [h["grad_norm"] for h in res.history]))
    return rows
