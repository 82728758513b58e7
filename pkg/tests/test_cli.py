import json
import os

import pytest

import psb.psb_encoder as psb_encoder
from psb import config as cfgmod
from psb.cli import main, planted_slots
from psb.synthdata import SynthConfig, generate_dataset, read_dataset, write_dataset

TINY = ["--set", "model.height=16", "--set", "model.width=16", "--set", "model.embed_hidden=8",
        "--set", "model.decoder_hidden=8", "--set", "psb.dim=8", "--set", "psb.mlp_hidden=8",
        "--set", "psb.time_heads=1", "--set", "psb.obj_heads=1", "--set", "psb.num_layers=1",
        "--set", "recurrent.dim=8", "--set", "recurrent.mlp_hidden=8"]


@pytest.fixture(autouse=True)
def no_env_seed(monkeypatch):
    monkeypatch.delenv("PSB_SEED", raising=False)


@pytest.fixture(scope="module")
def data16(tmp_path_factory):
    path = tmp_path_factory.mktemp("d") / "data.psbd"
    assert main(["gen-data", "--out", str(path), "--episodes", "4", "--T", "2",
                 "--H", "16", "--W", "16", "--seed", "3"]) == 0
    return path


@pytest.fixture(scope="module")
def trained(tmp_path_factory, data16):
    out = tmp_path_factory.mktemp("run")
    code = main(["train", "--data", str(data16), "--out", str(out), "--steps", "2",
                 "--batch-size", "2", *TINY])
    assert code == 0
    return out


def read_json(path):
    return json.loads(path.read_text())


# config resolution

def test_resolution_order(tmp_path):
    f = tmp_path / "c.json"
    f.write_text(json.dumps({"train": {"steps": 7, "batch_size": 3}}))
    cfg = cfgmod.resolve(f, [cfgmod.parse_assignment("train.steps=9")], env={})
    assert (cfg.train.steps, cfg.train.batch_size) == (9, 3)
    assert cfg.train.peak_lr == cfgmod.RunConfig().train.peak_lr


def test_unknown_key_named(tmp_path):
    with pytest.raises(cfgmod.ConfigError, match="train.stepz"):
        cfgmod.resolve(None, [cfgmod.parse_assignment("train.stepz=1")], env={})


def test_env_seed_overrides_every_seed():
    cfg = cfgmod.resolve(None, [cfgmod.parse_assignment("train.seed=5")], env={"PSB_SEED": "11"})
    assert cfg.data.seed == cfg.model.seed == cfg.train.seed == 11
    with pytest.raises(cfgmod.ConfigError):
        cfgmod.resolve(None, [], env={"PSB_SEED": "x"})


def test_config_dict_roundtrip():
    cfg = cfgmod.RunConfig()
    assert cfgmod.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_bad_assignment():
    with pytest.raises(cfgmod.ConfigError):
        cfgmod.parse_assignment("no-equals-sign")


# gen-data

def test_gen_data_empty(tmp_path, capsys):
    out = tmp_path / "e.psbd"
    assert main(["gen-data", "--out", str(out), "--episodes", "0"]) == 0
    assert read_dataset(out) == []
    assert "episodes 0" in capsys.readouterr().out
    assert (tmp_path / "config.json").exists()


def test_gen_data_checksum_repeats(tmp_path, capsys):
    sums = []
    for name in ("a", "b"):
        main(["gen-data", "--out", str(tmp_path / name / "d.psbd"), "--episodes", "2",
              "--seed", "4"])
        sums.append(capsys.readouterr().out.split()[-1])
    assert sums[0] == sums[1]


def test_gen_data_default_length(tmp_path):
    main(["gen-data", "--out", str(tmp_path / "d.psbd"), "--episodes", "1"])
    assert read_dataset(tmp_path / "d.psbd")[0].frames.shape[0] == 6


def test_gen_data_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["gen-data", "--out", str(blocker / "sub" / "d.psbd"), "--episodes", "1"]) == 2


def test_gen_data_env_seed(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("PSB_SEED", "8")
    main(["gen-data", "--out", str(tmp_path / "a.psbd"), "--episodes", "1"])
    a = capsys.readouterr().out
    main(["gen-data", "--out", str(tmp_path / "b.psbd"), "--episodes", "1", "--seed", "0"])
    assert capsys.readouterr().out == a


# train

def test_train_outputs(trained):
    assert (trained / "config.json").exists()
    hist = [json.loads(l) for l in (trained / "history.jsonl").read_text().splitlines()]
    assert [h["step"] for h in hist] == [0, 1]
    ckpts = sorted(p.name for p in (trained / "checkpoints").iterdir())
    assert "step_000000" in ckpts and "step_000002" in ckpts


def test_train_default_config_echo(tmp_path, data16):
    main(["train", "--data", str(tmp_path / "missing.psbd"), "--out", str(tmp_path)])
    cfg = read_json(tmp_path / "config.json")
    assert cfg["model"]["encoder"] == "psb"
    assert cfg["psb"]["num_layers"] == 3 and cfg["psb"]["num_slots"] == 4
    assert cfg["psb"]["dim"] == 192 and cfg["psb"]["mlp_hidden"] == 768
    assert cfg["psb"]["time_heads"] == 4 and cfg["psb"]["obj_heads"] == 4
    assert cfg["psb"]["init_mode"] == "learned" and cfg["psb"]["interaction"] == "decoupled"
    assert cfg["train"]["peak_lr"] == 3e-4 and cfg["train"]["warmup"] == 500
    assert cfg["train"]["half_life"] == 20000 and cfg["train"]["batch_size"] == 4


def test_train_missing_data(tmp_path):
    assert main(["train", "--data", str(tmp_path / "nope.psbd"), "--out", str(tmp_path)]) == 2
    assert main(["train", "--out", str(tmp_path)]) == 2


def test_train_bad_key(tmp_path, data16, capsys):
    code = main(["train", "--data", str(data16), "--out", str(tmp_path), "--set", "psb.dims=8"])
    assert code == 2
    assert "psb.dims" in capsys.readouterr().err


def test_train_data_mismatch(tmp_path, data16):
    assert main(["train", "--data", str(data16), "--out", str(tmp_path), "--steps", "1"]) == 2


def test_no_inverted_flag_reaches_encoder(tmp_path, data16, monkeypatch):
    calls = []
    real = psb_encoder.grouped_attention

    def spy(*a, **k):
        calls.append(k["inverted"])
        return real(*a, **k)

    monkeypatch.setattr(psb_encoder, "grouped_attention", spy)
    code = main(["train", "--data", str(data16), "--out", str(tmp_path), "--steps", "1",
                 "--batch-size", "1", "--no-inverted", *TINY])
    assert code == 0
    assert read_json(tmp_path / "config.json")["psb"]["inverted"] is False
    assert calls and not any(calls)


def test_ablation_flags_echoed(tmp_path, data16):
    code = main(["train", "--data", str(data16), "--out", str(tmp_path), "--steps", "1",
                 "--batch-size", "1", "--init", "random", "--interaction", "joint", *TINY])
    assert code == 0
    cfg = read_json(tmp_path / "config.json")
    assert cfg["psb"]["init_mode"] == "random" and cfg["psb"]["interaction"] == "joint"


def test_train_recurrent(tmp_path, data16):
    code = main(["train", "--data", str(data16), "--out", str(tmp_path), "--steps", "1",
                 "--batch-size", "1", "--encoder", "recurrent", *TINY])
    assert code == 0


def test_train_nan_abort(tmp_path, data16):
    code = main(["train", "--data", str(data16), "--out", str(tmp_path), "--steps", "3",
                 "--batch-size", "1", "--lr", "1e300", "--set", "train.warmup=1", *TINY])
    assert code == 3
    assert (tmp_path / "nan_snapshot").is_dir()


def test_train_reruns_match(tmp_path, data16):
    for name in ("a", "b"):
        main(["train", "--data", str(data16), "--out", str(tmp_path / name), "--steps", "2",
              "--batch-size", "2", *TINY])
    strip = lambda p: [{k: v for k, v in json.loads(l).items() if k != "wall_ms"}  # noqa: E731
                       for l in p.read_text().splitlines()]
    assert strip(tmp_path / "a" / "history.jsonl") == strip(tmp_path / "b" / "history.jsonl")
    assert ((tmp_path / "a" / "checkpoints" / "step_000002" / "params.bin").read_bytes()
            == (tmp_path / "b" / "checkpoints" / "step_000002" / "params.bin").read_bytes())


# eval

def test_eval_smoke(trained, data16, tmp_path):
    code = main(["eval", "--checkpoint", str(trained / "checkpoints" / "step_000002"), "--data", str(data16),
                 "--out", str(tmp_path)])
    assert code == 0
    out = read_json(tmp_path / "metrics.json")
    assert {"fgari", "psnr", "mse"} <= set(out)
    assert (tmp_path / "config.json").exists()


def test_eval_single_frame_groupings_agree(trained, tmp_path, capsys):
    path = tmp_path / "one.psbd"
    write_dataset(path, generate_dataset(3, 1, SynthConfig(T=1, H=16, W=16)))
    scores = []
    for g in ("per-frame", "per-video"):
        capsys.readouterr()
        assert main(["eval", "--checkpoint", str(trained / "checkpoints" / "step_000002"), "--data", str(path),
                     "--grouping", g, "--metrics", "fgari"]) == 0
        scores.append(json.loads(capsys.readouterr().out)["fgari"])
    assert scores[0] == scores[1]


def test_eval_shape_mismatch(trained, tmp_path):
    path = tmp_path / "big.psbd"
    write_dataset(path, generate_dataset(1, 0, SynthConfig(T=2, H=32, W=32)))
    assert main(["eval", "--checkpoint", str(trained / "checkpoints" / "step_000002"), "--data", str(path)]) == 4


def test_eval_episode_too_long(trained, tmp_path):
    path = tmp_path / "long.psbd"
    write_dataset(path, generate_dataset(1, 0, SynthConfig(T=9, H=16, W=16)))
    assert main(["eval", "--checkpoint", str(trained / "checkpoints" / "step_000002"), "--data", str(path)]) == 4


def test_eval_bad_checkpoint(tmp_path, data16):
    assert main(["eval", "--checkpoint", str(tmp_path / "none"), "--data", str(data16)]) == 4


def test_eval_unknown_metric(trained, data16):
    assert main(["eval", "--checkpoint", str(trained / "checkpoints" / "step_000002"), "--data", str(data16),
                 "--metrics", "fgari,iou"]) == 2


# probe

def test_probe_untrained_emits_scores(trained, data16, tmp_path):
    code = main(["probe", "--checkpoint", str(trained / "checkpoints" / "step_000000"), "--data", str(data16),
                 "--factors", "position,color,shape,size", "--out", str(tmp_path)])
    assert code == 0
    out = read_json(tmp_path / "probe.json")
    assert set(out["scores"]) == {"position", "color", "shape", "size"}
    assert out["n_episodes"] == 4


def test_probe_planted_recovers(trained, tmp_path, capsys):
    path = tmp_path / "p.psbd"
    write_dataset(path, generate_dataset(400, 2, SynthConfig(T=2, H=16, W=16)))
    capsys.readouterr()
    code = main(["probe", "--checkpoint", str(trained / "checkpoints" / "step_000002"), "--data", str(path),
                 "--planted", "--factors", "position,velocity,color,shape,size"])
    assert code == 0
    scores = json.loads(capsys.readouterr().out)["scores"]
    assert scores["position"]["value"] > 0.99
    assert scores["velocity"]["value"] > 0.99
    for name in ("color", "shape", "size"):
        assert scores[name]["value"] == 1.0


def test_probe_more_objects_than_slots(tmp_path):
    path = tmp_path / "d.psbd"
    main(["gen-data", "--out", str(path), "--episodes", "2", "--T", "2", "--H", "16", "--W", "16",
          "--set", "data.min_objects=3", "--set", "data.max_objects=3"])
    run = tmp_path / "run"
    assert main(["train", "--data", str(path), "--out", str(run), "--steps", "1",
                 "--batch-size", "1", "--set", "psb.num_slots=2", *TINY]) == 0
    assert main(["probe", "--checkpoint", str(run / "checkpoints" / "step_000001"), "--data", str(path)]) == 5


def test_planted_slots_shape():
    eps = generate_dataset(3, 0, SynthConfig(T=2, H=16, W=16))
    assert all(s.shape == (2, 4, 32) for s in planted_slots(eps, 4, 32))
    # never narrower than the 18 factor features
    assert all(s.shape == (2, 4, 18) for s in planted_slots(eps, 4, 8))


# bench

def test_bench_outputs(tmp_path, capsys):
    code = main(["bench", "--out", str(tmp_path), "--encoders", "psb,recurrent", "--T", "3",
                 "--set", "bench.L=4", "--set", "bench.D=8", "--set", "bench.N=2",
                 "--set", "bench.batch=1", "--workers", "1"])
    assert code == 0
    rows = (tmp_path / "bench.csv").read_text().splitlines()
    assert len(rows) == 3
    assert (tmp_path / "plot.svg").read_text().lstrip().startswith("<?xml")
    assert read_json(tmp_path / "bench_meta.json")["workers"] == 1
    assert read_json(tmp_path / "config.json")["bench"]["T_list"] == [3]


def test_bench_bad_list(tmp_path):
    assert main(["bench", "--out", str(tmp_path), "--T", "6,x"]) == 2


def test_module_entry_point():
    import subprocess
    import sys
    res = subprocess.run([sys.executable, "-m", "psb", "--help"], capture_output=True, text=True,
                         env={**os.environ, "PYTHONPATH": os.pathsep.join(sys.path)})
    assert res.returncode == 0 and "gen-data" in res.stdout
