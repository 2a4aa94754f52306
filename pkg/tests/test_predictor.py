import dataclasses

import numpy as np
import pytest

from camixer import tensor as T
from camixer.config import ModelConfig
from camixer.nn import zero_
from camixer.predictor import Conditions, GlobalPredictor, Predictor, build_window_condition
from camixer.rng import Rng
from camixer.tensor import DimensionError, Tensor

CFG = ModelConfig(channels=16, window=4, groups=(1,), scale=2, offset_scale=8.0)


def conditions(cfg, B=2, H=8, W=8, seed=0):
    r = np.random.default_rng(seed)
    v = Tensor(r.standard_normal((B, cfg.channels, H, W)))
    cg = Tensor(r.standard_normal((B, 2, H, W)))
    return Conditions(v, cg, build_window_condition(H, W, cfg.window))


def test_window_condition_two_point_ramp():
    cw = build_window_condition(4, 4, 2).data
    np.testing.assert_array_equal(cw[0, 1, 0], [-1, 1, -1, 1])
    np.testing.assert_array_equal(cw[0, 0, :, 0], [-1, 1, -1, 1])


def test_window_condition_starts_at_minus_one_and_tiles():
    M = 4
    cw = build_window_condition(12, 8, M).data[0]
    np.testing.assert_array_equal(cw[:, ::M, ::M], -1.0)
    assert cw.min() == -1.0 and cw.max() == 1.0
    for wy in range(0, 12, M):
        for wx in range(0, 8, M):
            np.testing.assert_array_equal(cw[:, wy : wy + M, wx : wx + M], cw[:, :M, :M])


def test_window_condition_indivisible():
    with pytest.raises(DimensionError):
        build_window_condition(6, 8, 4)


def test_output_shapes_and_ranges():
    p = Predictor(CFG, Rng(0))
    out = p(conditions(CFG))
    assert out.offsets.shape == (2, 2, 8, 8)
    assert out.mask_logits.shape == (2, 4, 2)
    assert out.spatial_attn.shape == (2, 1, 8, 8)
    assert out.channel_attn.shape == (2, 16, 1, 1)
    for a in (out.spatial_attn.data, out.channel_attn.data):
        assert a.min() > 0 and a.max() < 1


def test_zero_initialised_offset_head():
    out = Predictor(CFG, Rng(1))(conditions(CFG, seed=3))
    np.testing.assert_array_equal(out.offsets.data, 0.0)


def test_no_offsets_when_r_is_zero():
    cfg = dataclasses.replace(CFG, offset_scale=0.0)
    p = Predictor(cfg, Rng(2))
    p.offsets.weight.data = np.random.default_rng(0).standard_normal(p.offsets.weight.shape).astype(np.float32)
    np.testing.assert_array_equal(p(conditions(cfg)).offsets.data, 0.0)


@pytest.mark.parametrize("r", [1.0, 4.0, 8.0, 16.0])
def test_offsets_bounded_by_r(r):
    cfg = dataclasses.replace(CFG, offset_scale=r)
    p = Predictor(cfg, Rng(3))
    p.offsets.weight.data = np.random.default_rng(1).standard_normal(p.offsets.weight.shape).astype(np.float32) * 1e4
    off = p(conditions(cfg, seed=4)).offsets.data
    assert np.abs(off).max() <= r
    assert np.abs(off).max() > 0.5 * r


def test_global_predictor_shape_and_zero_weights():
    g = GlobalPredictor(CFG, Rng(4))
    f0 = Tensor(np.random.default_rng(2).standard_normal((3, 16, 8, 8)))
    assert g(f0).shape == (3, 2, 8, 8)
    for p in g.parameters():
        zero_(p)
    np.testing.assert_array_equal(g(f0).data, 0.0)


def test_global_condition_influences_mask():
    p = Predictor(CFG, Rng(5))
    c = conditions(CFG, seed=5)
    a = p(c).mask_logits.data
    b = p(Conditions(c.local, Tensor(np.zeros_like(c.global_.data)), c.window)).mask_logits.data
    assert np.abs(a - b).max() > 1e-2 * np.abs(a).max()


def test_channel_mismatch():
    with pytest.raises(DimensionError):
        Predictor(CFG, Rng(6))(conditions(dataclasses.replace(CFG, channels=8)))


def test_extra_condition_channel():
    cfg = dataclasses.replace(CFG, extra_cond_channels=1)
    p = Predictor(cfg, Rng(7))
    c = conditions(cfg)
    with pytest.raises(DimensionError):
        p(c)
    c.extra = Tensor(np.ones((2, 1, 8, 8)))
    assert p(c).mask_logits.shape == (2, 4, 2)


@pytest.mark.parametrize("flag", ["use_offsets", "use_spatial_attn", "use_channel_attn", "use_global_cond", "use_window_cond"])
def test_ablation_flags_replace_components(flag):
    cfg = dataclasses.replace(CFG, **{flag: False})
    p = Predictor(cfg, Rng(8))
    out = p(conditions(cfg))
    if flag == "use_offsets":
        np.testing.assert_array_equal(out.offsets.data, 0.0)
    if flag == "use_spatial_attn":
        np.testing.assert_array_equal(out.spatial_attn.data, 1.0)
    if flag == "use_channel_attn":
        np.testing.assert_array_equal(out.channel_attn.data, 1.0)


def test_constant_shift_of_logits_keeps_ranking():
    from camixer.mixer import route

    logits = np.random.default_rng(9).standard_normal((16, 2))
    a = route(Tensor(logits), gamma_target=0.25)
    b = route(Tensor(logits + 3.7), gamma_target=0.25)
    np.testing.assert_array_equal(a.hard_idx, b.hard_idx)
    with T.default_dtype(np.float64):
        sa = route(Tensor(logits), training=True, rng=Rng(1))
        sb = route(Tensor(logits + 3.7), training=True, rng=Rng(1))
    np.testing.assert_array_equal(sa.hard_idx, sb.hard_idx)
