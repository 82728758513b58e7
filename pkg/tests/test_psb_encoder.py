import numpy as np
import pytest

from psb import psb_encoder as pe
from psb.numerics import Tensor, grad_check
from psb.psb_encoder import PSBConfig, PSBEncoder, attention_elements


def small_cfg(**kw):
    base = dict(num_layers=2, num_slots=3, dim=8, ca_heads=1, time_heads=2, obj_heads=2,
                mlp_hidden=16, t_max=6, window=6)
    base.update(kw)
    return PSBConfig(**base)


def random_encoder(cfg, seed=0):
    enc = PSBEncoder(cfg, seed)
    enc.assign_names()
    return enc.randomize(np.random.default_rng(seed + 100))


def feats(rng, *shape):
    return Tensor(rng.standard_normal(shape))


def test_table_defaults():
    cfg = PSBConfig()
    assert (cfg.num_layers, cfg.dim, cfg.mlp_hidden, cfg.ca_heads, cfg.time_heads, cfg.obj_heads) \
        == (3, 192, 768, 1, 4, 4)
    assert cfg.causal and cfg.inverted and cfg.interaction == "decoupled" and cfg.init_mode == "learned"


@pytest.mark.parametrize("kw", [dict(init_mode="zero"), dict(interaction="both"),
                                dict(dim=10, time_heads=4)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        small_cfg(**kw)


def test_attention_element_counts():
    assert attention_elements(4, 6, "joint") == 576
    assert attention_elements(4, 6, "decoupled") == 240


def test_zero_init_blocks_are_identity(rng):
    enc = PSBEncoder(small_cfg(), 0)
    out = enc(feats(rng, 2, 4, 5, 8)).data
    expected = np.broadcast_to(enc.init.slots.data, (2, 4, 3, 8))
    np.testing.assert_array_equal(out, expected)


def test_output_shape_and_t_max(rng):
    enc = random_encoder(small_cfg())
    assert enc(feats(rng, 2, 5, 7, 8)).shape == (2, 5, 3, 8)
    with pytest.raises(ValueError):
        enc(feats(rng, 1, 7, 4, 8))


@pytest.mark.parametrize("interaction", ["decoupled", "joint"])
def test_causal_encoder_ignores_future_frames(rng, interaction):
    enc = random_encoder(small_cfg(interaction=interaction))
    e = rng.standard_normal((1, 6, 4, 8))
    e2 = e.copy()
    e2[:, 5] += rng.standard_normal((4, 8)) * 3
    a, b = enc(Tensor(e)).data, enc(Tensor(e2)).data
    assert np.abs(a[:, :5] - b[:, :5]).max() < 1e-10
    assert np.abs(a[:, 5] - b[:, 5]).max() > 1e-6


def test_non_causal_encoder_sees_future(rng):
    enc = random_encoder(small_cfg(causal=False))
    e = rng.standard_normal((1, 4, 4, 8))
    e2 = e.copy()
    e2[:, 3] += rng.standard_normal((4, 8))
    assert np.abs(enc(Tensor(e)).data[:, 0] - enc(Tensor(e2)).data[:, 0]).max() > 1e-6


def test_slot_permutation_equivariance(rng):
    enc = random_encoder(small_cfg())
    e = feats(rng, 2, 4, 5, 8)
    s0 = enc.init.slots.data
    perm = np.array([2, 0, 1])
    base = enc(e, slots0=Tensor(s0)).data
    permuted = enc(e, slots0=Tensor(s0[perm])).data
    np.testing.assert_allclose(permuted, base[..., perm, :], atol=1e-12)


def test_random_init_is_seeded():
    enc = random_encoder(small_cfg(init_mode="random"))
    e = Tensor(np.random.default_rng(0).standard_normal((2, 3, 4, 8)))
    np.testing.assert_array_equal(enc(e, seed=5).data, enc(e, seed=5).data)
    assert not np.allclose(enc(e, seed=5).data, enc(e, seed=6).data)


def test_no_inverted_flag_switches_cross_attention_kernel(monkeypatch, rng):
    calls = []
    real = pe.grouped_attention

    def spy(*a, **k):
        calls.append(k["inverted"])
        return real(*a, **k)

    monkeypatch.setattr(pe, "grouped_attention", spy)
    random_encoder(small_cfg(inverted=True))(feats(rng, 1, 2, 3, 8))
    random_encoder(small_cfg(inverted=False))(feats(rng, 1, 2, 3, 8))
    assert calls == [True, True, False, False]


def test_cross_attention_competition_is_per_time_step(rng):
    enc = random_encoder(small_cfg(num_layers=1))
    blk = enc.block[0]
    s = feats(rng, 1, 3, 3, 8)
    e = feats(rng, 1, 3, 4, 8)
    full = blk.cross_attend(s, e).data
    # the t=0 group only sees frame 0, so it equals a one-frame call
    alone = blk.cross_attend(s[:, :1], e[:, :1]).data
    np.testing.assert_allclose(full[:, 0], alone[:, 0], atol=1e-12)


def test_sliding_window_matches_standalone(rng):
    cfg = small_cfg(t_max=3, window=3)
    enc = random_encoder(cfg)
    e = rng.standard_normal((2, 7, 4, 8))
    slid = enc.encode_sliding(Tensor(e)).data
    for t in range(7):
        lo = max(0, t - 2)
        ref = enc(Tensor(e[:, lo:t + 1])).data[:, -1]
        np.testing.assert_allclose(slid[:, t], ref, atol=1e-12)


def test_sliding_requires_causal():
    enc = PSBEncoder(small_cfg(causal=False), 0)
    with pytest.raises(ValueError):
        enc.encode_sliding(Tensor(np.zeros((1, 2, 3, 8))))


@pytest.mark.parametrize("interaction", ["decoupled", "joint"])
def test_encoder_gradients(interaction):
    cfg = small_cfg(num_layers=1, num_slots=2, dim=4, time_heads=2, obj_heads=2, mlp_hidden=6,
                    interaction=interaction)
    enc = random_encoder(cfg, seed=3)
    rng = np.random.default_rng(4)
    e = Tensor(rng.standard_normal((1, 3, 3, 4)))
    w = rng.standard_normal((1, 3, 2, 4))
    report = grad_check(lambda: (enc(e) * w).sum(), enc.params(), tol=1e-4, max_entries=12)
    assert report.passed, report.per_param
