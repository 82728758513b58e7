"""Command-line entry point: gen-data, train, eval, probe, bench.

Exit codes: 0 ok, 2 usage or config error, 3 numerical abort, 4 checkpoint
mismatch, 5 metric precondition violated.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .checkpoint import CheckpointError, load_checkpoint, load_into
from .harness import TrainingAborted, build_model, evaluate, train
from .metrics import GROUPINGS, MetricPreconditionError, ProbeProblem, perm_invariant_probe
from .synthdata import DatasetError, generate_dataset, read_dataset, write_dataset

EXIT_OK, EXIT_USAGE, EXIT_NAN, EXIT_CKPT, EXIT_METRIC = 0, 2, 3, 4, 5

log = logging.getLogger("psb")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _overrides(args, mapping: dict) -> list[dict]:
    out = []
    for attr, key in mapping.items():
        value = getattr(args, attr, None)
        if value is not None:
            out.append(cfgmod.parse_assignment(f"{key}={json.dumps(value)}"))
    out.extend(cfgmod.parse_assignment(s) for s in getattr(args, "set", None) or [])
    return out


def _resolve(args, mapping: dict) -> cfgmod.RunConfig:
    try:
        return cfgmod.resolve(getattr(args, "config", None), _overrides(args, mapping))
    except cfgmod.ConfigError as exc:
        raise CliError(EXIT_USAGE, str(exc)) from exc


def _read_data(path) -> list:
    if path is None:
        raise CliError(EXIT_USAGE, "--data is required")
    try:
        return read_dataset(path)
    except (OSError, DatasetError) as exc:
        raise CliError(EXIT_USAGE, f"cannot read dataset {path}: {exc}") from exc


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def cmd_gen_data(args) -> int:
    cfg = _resolve(args, {"episodes": "data.episodes", "seed": "data.seed", "T": "data.T",
                          "H": "data.H", "W": "data.W"})
    out = Path(args.out)
    try:
        synth = cfg.data.synth()
    except ValueError as exc:
        raise CliError(EXIT_USAGE, str(exc)) from exc
    try:
        cfgmod.write_config(out.parent, cfg)
        write_dataset(out, generate_dataset(cfg.data.episodes, cfg.data.seed, synth))
    except OSError as exc:
        raise CliError(EXIT_USAGE, f"cannot write {out}: {exc}") from exc
    print(f"episodes {cfg.data.episodes} sha256 {_sha256(out)}")
    return EXIT_OK


def _model_from_checkpoint(path):
    try:
        ck = load_checkpoint(path)
        cfg = cfgmod.from_dict(ck.config)
        model = build_model(cfg.model, cfg.encoder_config(), "float64")
        load_into(model, ck.params())
    except (CheckpointError, cfgmod.ConfigError) as exc:
        raise CliError(EXIT_CKPT, str(exc)) from exc
    return cfg, model


def _check_data_fits(cfg: cfgmod.RunConfig, episodes) -> None:
    if not episodes:
        return
    T, C, H, W = episodes[0].frames.shape
    if (H, W, C) != (cfg.model.height, cfg.model.width, cfg.model.channels):
        raise CliError(EXIT_CKPT, f"data frames {C}x{H}x{W} do not match model "
                                  f"{cfg.model.channels}x{cfg.model.height}x{cfg.model.width}")
    if cfg.model.encoder == "psb" and T > cfg.psb.t_max:
        raise CliError(EXIT_CKPT, f"episode length {T} exceeds model t_max {cfg.psb.t_max}")


def cmd_train(args) -> int:
    mapping = {"encoder": "model.encoder", "init": "psb.init_mode", "interaction": "psb.interaction",
               "steps": "train.steps", "batch_size": "train.batch_size", "lr": "train.peak_lr",
               "workers": "train.workers", "shards": "train.shards", "seed": "train.seed"}
    if args.no_inverted:
        args.set = (args.set or []) + ["psb.inverted=false"]
    if args.init:
        args.set = (args.set or []) + [f"recurrent.init_mode={args.init}"]
    cfg = _resolve(args, mapping)
    out = Path(args.out)
    cfgmod.write_config(out, cfg)
    episodes = _read_data(args.data)
    try:
        _check_data_fits(cfg, episodes)
    except CliError as exc:
        raise CliError(EXIT_USAGE, str(exc)) from exc
    try:
        res = train(cfg.model, cfg.encoder_config(), cfg.train, episodes, out_dir=out,
                    resume=args.resume, config=cfg.to_dict())
    except TrainingAborted as exc:
        print(f"numerical abort: {exc}; snapshot at {exc.snapshot}", file=sys.stderr)
        return EXIT_NAN
    except CheckpointError as exc:
        raise CliError(EXIT_CKPT, str(exc)) from exc
    last = res.history[-1] if res.history else None
    print(json.dumps({"steps": len(res.history), "final": last,
                      "checkpoint": str(res.checkpoints[-1]) if res.checkpoints else None}))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg, model = _model_from_checkpoint(args.checkpoint)
    if args.metrics:
        cfg.eval.metrics = args.metrics.split(",")
    if args.grouping:
        cfg.eval.grouping = args.grouping
    unknown = set(cfg.eval.metrics) - {"fgari", "psnr"}
    if unknown:
        raise CliError(EXIT_USAGE, f"unknown metrics: {sorted(unknown)}")
    if args.out:
        cfgmod.write_config(args.out, cfg)
    episodes = _read_data(args.data)
    _check_data_fits(cfg, episodes)
    try:
        result = evaluate(model, episodes, cfg.eval.grouping, metrics=cfg.eval.metrics)
    except MetricPreconditionError as exc:
        raise CliError(EXIT_METRIC, str(exc)) from exc
    except ValueError as exc:
        raise CliError(EXIT_USAGE, str(exc)) from exc
    text = json.dumps(result, indent=2, sort_keys=True)
    if args.out:
        (Path(args.out) / "metrics.json").write_text(text + "\n")
    print(text)
    return EXIT_OK


def planted_slots(episodes, N: int, D: int, seed: int = 0) -> list[np.ndarray]:
    """Slots that are a fixed random linear image of each object's factors,
    placed in a random per-episode slot order; unused slots are noise.

    The width is raised to the factor-feature width when ``D`` is smaller so
    the planted map stays injective."""
    rng = np.random.default_rng(seed)
    feats = [_factor_features(ep) for ep in episodes]
    D = max(D, feats[0].shape[-1])
    A = rng.standard_normal((feats[0].shape[-1], D))
    out = []
    for f in feats:
        T, M, _ = f.shape
        s = rng.standard_normal((T, N, D))
        order = rng.permutation(N)[:M]
        s[:, order] = f @ A
        out.append(s)
    return out


def _factor_features(ep) -> np.ndarray:
    fa = ep.factor_arrays()
    T, M = fa["shape"].shape
    onehot = lambda x, k: np.eye(k)[x]  # noqa: E731
    scale = float(max(ep.frames.shape[-2:]))
    return np.concatenate([fa["position"] / scale, fa["velocity"], onehot(fa["color"], 8),
                           onehot(fa["shape"], 3), onehot(fa["size"], 3)], axis=-1)


def cmd_probe(args) -> int:
    cfg, model = _model_from_checkpoint(args.checkpoint)
    if args.factors:
        cfg.probe.factors = args.factors.split(",")
    if args.out:
        cfgmod.write_config(args.out, cfg)
    episodes = _read_data(args.data)
    _check_data_fits(cfg, episodes)
    enc_cfg = cfg.encoder_config()
    N, D = enc_cfg.num_slots, enc_cfg.dim
    too_many = [ep.num_objects for ep in episodes if ep.num_objects > N]
    if too_many:
        print(f"probe precondition failed: {max(too_many)} objects but only {N} slots",
              file=sys.stderr)
        return EXIT_METRIC
    if args.planted:
        slots = planted_slots(episodes, N, D, cfg.train.seed)
    else:
        frames = np.stack([ep.frames for ep in episodes]).astype(np.float64)
        slots = [model.encode(frames[i:i + 8]).data for i in range(0, len(frames), 8)]
        slots = list(np.concatenate(slots))
    known = {"position", "velocity", "color", "shape", "size"}
    bad = set(cfg.probe.factors) - known
    if bad:
        raise CliError(EXIT_USAGE, f"unknown factors: {sorted(bad)}")
    problems = [ProbeProblem(s, ep.factor_arrays()) for s, ep in zip(slots, episodes)]
    try:
        res = perm_invariant_probe(problems, cfg.probe.factors, lam=cfg.probe.lam,
                                   max_rounds=cfg.probe.max_rounds, holdout=cfg.probe.holdout)
    except MetricPreconditionError as exc:
        print(f"probe precondition failed: {exc}", file=sys.stderr)
        return EXIT_METRIC
    identity = sum(p == tuple(range(len(p))) for p in res.perms)
    report = {"scores": res.scores, "em_rounds": res.rounds,
              "objective_history": res.objective_history,
              "identity_permutations": identity, "n_episodes": len(problems)}
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        (Path(args.out) / "probe.json").write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bench import bench
    from .plotting import plot_step_times

    mapping = {"reps": "bench.reps", "workers": "bench.workers"}
    if args.encoders:
        args.set = (args.set or []) + [f"bench.encoders={json.dumps(args.encoders.split(','))}"]
    if args.T:
        try:
            Ts = [int(t) for t in args.T.split(",")]
        except ValueError as exc:
            raise CliError(EXIT_USAGE, f"bad --T list {args.T!r}") from exc
        args.set = (args.set or []) + [f"bench.T_list={json.dumps(Ts)}"]
    cfg = _resolve(args, mapping)
    out = Path(args.out)
    cfgmod.write_config(out, cfg)
    b = cfg.bench
    try:
        report = bench(b.encoders, b.T_list, b.reps, b.warmup, b.N, b.L, b.D, b.batch, b.workers,
                       cfg.train.seed)
    except ValueError as exc:
        raise CliError(EXIT_USAGE, str(exc)) from exc
    report.to_csv(out / "bench.csv")
    plot_step_times(report, out / "plot.svg")
    (out / "bench_meta.json").write_text(json.dumps(report.meta, indent=2) + "\n")
    for r in report.rows:
        print(f"{r.encoder:10s} T={r.T:3d} {r.mean_s * 1e3:9.2f} ms +- {r.std_s * 1e3:.2f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="psb", description="Parallel slot encoder toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="JSON run config")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config entry, e.g. train.steps=100")
        sp.add_argument("--out", required=out_required)

    g = sub.add_parser("gen-data", help="write a synthetic sprite dataset")
    common(g)
    g.add_argument("--episodes", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--T", type=int)
    g.add_argument("--H", type=int)
    g.add_argument("--W", type=int)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train the autoencoder")
    common(t)
    t.add_argument("--data")
    t.add_argument("--encoder", choices=["psb", "recurrent"])
    t.add_argument("--init", choices=["learned", "random"])
    t.add_argument("--interaction", choices=["decoupled", "joint"])
    t.add_argument("--no-inverted", action="store_true")
    t.add_argument("--steps", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--workers", type=int)
    t.add_argument("--shards", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--resume", help="checkpoint directory to continue from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="segmentation and reconstruction metrics")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data")
    e.add_argument("--metrics", help="comma list of fgari,psnr")
    e.add_argument("--grouping", choices=GROUPINGS)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    pr = sub.add_parser("probe", help="permutation-invariant linear probing")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--data")
    pr.add_argument("--factors", help="comma list of position,velocity,color,shape,size")
    pr.add_argument("--planted", action="store_true",
                    help="replace encoder slots by planted linear slots (self-check)")
    pr.add_argument("--out")
    pr.set_defaults(func=cmd_probe)

    b = sub.add_parser("bench", help="step-time benchmark")
    common(b)
    b.add_argument("--encoders", help="comma list of psb,psb-joint,recurrent")
    b.add_argument("--T", help="comma list of episode lengths")
    b.add_argument("--reps", type=int)
    b.add_argument("--workers", type=int)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
