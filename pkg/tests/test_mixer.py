import numpy as np
import pytest

from camixer import macs
from camixer import tensor as T
from camixer.config import ModelConfig
from camixer.mixer import CAMixer, THRESHOLD, TOPK, TRAIN, route, simple_branch, topk_windows, window_attention
from camixer.predictor import build_window_condition
from camixer.rng import Rng
from camixer.tensor import Tensor

from builders import random_mixer_case
from oracles import attention_loops, wmsa_reference


def logits_from_diffs(diffs):
    d = np.asarray(diffs, dtype=np.float64)
    return Tensor(np.stack([d, np.zeros_like(d)], axis=1))


# -- routing ---------------------------------------------------------------------

def test_topk_hand_case():
    plan = route(logits_from_diffs([0.9, 0.1, 0.8, 0.2]), gamma_target=0.5)
    assert plan.hard_idx.tolist() == [0, 2]
    assert plan.simple_idx.tolist() == [1, 3]
    assert plan.K == 2 and plan.gamma_actual == 0.5 and plan.mode == TOPK


def test_topk_extremes():
    lg = logits_from_diffs(np.random.default_rng(0).standard_normal(9))
    full = route(lg, gamma_target=1.0)
    assert full.K == 9 and full.gamma_actual == 1.0 and full.simple_idx.size == 0
    none = route(lg, gamma_target=0.0)
    assert none.K == 0 and none.gamma_actual == 0.0 and none.hard_idx.size == 0


def test_topk_ties_go_to_lower_index():
    assert np.flatnonzero(topk_windows(np.array([1.0, 2.0, 2.0, 2.0]), 2)).tolist() == [1, 2]


def test_topk_count_rounds_half_up():
    lg = logits_from_diffs(np.arange(10.0))
    assert route(lg, gamma_target=0.25).K == 3
    assert route(lg, gamma_target=0.33).K == 3


def test_threshold_mode():
    plan = route(logits_from_diffs([0.3, -0.1, 0.0, 2.0]))
    assert plan.mode == THRESHOLD
    assert plan.hard_idx.tolist() == [0, 3]


def test_training_route_is_partition_with_live_mask():
    logits = Tensor(np.random.default_rng(1).standard_normal((20, 2)))
    plan = route(logits, training=True, rng=Rng(3))
    assert plan.mode == TRAIN
    assert sorted(np.concatenate([plan.hard_idx, plan.simple_idx]).tolist()) == list(range(20))
    np.testing.assert_array_equal(plan.mask.data.ravel() > 0.5, np.isin(np.arange(20), plan.hard_idx))
    assert plan.K == int(plan.mask.data.sum())


def test_gamma_target_out_of_range():
    with pytest.raises(ValueError):
        route(logits_from_diffs([1.0, 2.0]), gamma_target=1.5)


# -- branches ------------------------------------------------------------------------------

def test_zero_projections_give_window_mean():
    with T.default_dtype(np.float64):
        r = np.random.default_rng(2)
        x = Tensor(r.standard_normal((3, 4, 5)))
        v = Tensor(r.standard_normal((3, 4, 5)))
        z = Tensor(np.zeros((5, 5)))
        out = window_attention(x, v, z, z).data
    np.testing.assert_allclose(out, np.broadcast_to(v.data.mean(axis=1, keepdims=True), out.shape), atol=1e-14)


def test_attention_single_window_brute_force():
    with T.default_dtype(np.float64):
        r = np.random.default_rng(3)
        x = r.standard_normal((1, 4, 1))
        v = r.standard_normal((1, 4, 1))
        wq, wk = np.array([[0.7]]), np.array([[-1.3]])
        out = window_attention(Tensor(x), Tensor(v), Tensor(wq), Tensor(wk)).data
    np.testing.assert_allclose(out[0], attention_loops(x[0] @ wq, x[0] @ wk, v[0]), atol=1e-14)


@pytest.mark.parametrize("heads", [1, 2])
def test_full_ratio_matches_plain_window_attention(heads):
    cfg = ModelConfig(channels=8, window=4, groups=(1,), scale=2, heads=heads, rho=0.25, use_offsets=False)
    with T.default_dtype(np.float64):
        mixer = CAMixer(cfg, Rng(4)).astype(np.float64)
        r = np.random.default_rng(5)
        x = Tensor(r.standard_normal((1, 8, 8, 8)))
        for lin in (mixer.wq, mixer.wk):
            lin.weight.data = r.standard_normal(lin.weight.shape) * 0.4
        cg = Tensor(r.standard_normal((1, 2, 8, 8)))
        cw = build_window_condition(8, 8, 4)
        out = mixer(x, cg, cw, gamma_target=1.0)
        v = mixer.value(x).data
        ref_attn = wmsa_reference(x.data, v, mixer.wq.weight.data, mixer.wk.weight.data, 4, heads)
        # reproduce the conv branch and projection on the reference attention map
        ra = Tensor(ref_attn)
        local = mixer.dw2(T.gelu(mixer.dw1(ra)))
        ref = mixer.proj(local * out.guidance.channel_attn + ra).data
    np.testing.assert_allclose(out.out.data, ref, atol=1e-12)


def test_simple_branch_cases():
    r = np.random.default_rng(6)
    v = r.standard_normal((3, 4, 2))
    np.testing.assert_array_equal(simple_branch(Tensor(v), Tensor(np.ones((3, 4, 1)))).data, v.astype(np.float32))
    np.testing.assert_array_equal(simple_branch(Tensor(v), Tensor(np.zeros((3, 4, 1)))).data, 0.0)
    s = r.random((3, 4, 1))
    got = simple_branch(Tensor(v, dtype=np.float64), Tensor(s, dtype=np.float64)).data
    for n in range(3):
        for t in range(4):
            for c in range(2):
                assert got[n, t, c] == v[n, t, c] * s[n, t, 0]


# -- full mixer ---------------------------------------------------------------------------------

@pytest.mark.parametrize("seed", range(10))
def test_training_and_inference_paths_agree(seed):
    cfg, mixer, x, cg, cw, mask = random_mixer_case(seed)
    with T.default_dtype(np.float64):
        a = mixer(x, cg, cw, training=True, fixed_mask=mask).out.data
        b = mixer(x, cg, cw, training=False, fixed_mask=mask).out.data
    assert np.abs(a - b).max() < 1e-5


def test_output_shape_and_gamma_types():
    cfg, mixer, x, cg, cw, mask = random_mixer_case(11)
    with T.default_dtype(np.float64):
        out = mixer(x, cg, cw, gamma_target=0.5)
        assert out.out.shape == x.shape
        assert isinstance(out.gamma, float) and 0 <= out.gamma <= 1
        tr = mixer(x, cg, cw, training=True, rng=Rng(0))
        assert isinstance(tr.gamma, Tensor)


def _mixer_inputs(seed=12):
    cfg = ModelConfig(channels=8, window=4, groups=(1,), scale=2, rho=0.25)
    mixer = CAMixer(cfg, Rng(seed))
    r = np.random.default_rng(seed)
    x = Tensor(r.standard_normal((1, 8, 16, 16)))
    cg = Tensor(r.standard_normal((1, 2, 16, 16)))
    return mixer, x, cg, build_window_condition(16, 16, 4)


def test_zero_ratio_runs_no_attention():
    mixer, x, cg, cw = _mixer_inputs()
    with macs.MacCounter() as c:
        out = mixer(x, cg, cw, gamma_target=0.0)
    assert out.plan.K == 0
    assert c.matching("attention") == 0
    assert c.total > 0


def test_attention_macs_strictly_increase_with_k():
    mixer, x, cg, cw = _mixer_inputs()
    counts = []
    for g in (0.0, 0.25, 0.5, 0.75, 1.0):
        with macs.MacCounter() as c:
            out = mixer(x, cg, cw, gamma_target=g)
        counts.append((out.plan.K, c.matching("attention")))
    ks, ms = zip(*counts)
    assert list(ks) == [0, 4, 8, 12, 16]
    assert all(b > a for a, b in zip(ms, ms[1:]))
    # proportional to K
    per = ms[-1] / ks[-1]
    assert all(m == k * per for k, m in counts)


def test_inference_plan_is_deterministic():
    mixer, x, cg, cw = _mixer_inputs()
    a = mixer(x, cg, cw).plan
    b = mixer(x, cg, cw).plan
    np.testing.assert_array_equal(a.hard_idx, b.hard_idx)


def test_mask_logits_receive_gradient_in_training():
    mixer, x, cg, cw = _mixer_inputs()
    out = mixer(x, cg, cw, training=True, rng=Rng(1))
    (out.out * out.out).mean().backward()
    g = mixer.predictor.mask.weight.grad
    assert g is not None and np.abs(g).max() > 0


def test_zero_depthwise_makes_conv_branch_identity():
    mixer, x, cg, cw = _mixer_inputs()
    for conv in (mixer.dw1, mixer.dw2):
        conv.weight.data[:] = 0
        conv.bias.data[:] = 0
    out = mixer(x, cg, cw, gamma_target=0.0)
    v = mixer.value(x)
    vw = T.window_partition(v, 4)
    sw = T.window_partition(out.guidance.spatial_attn, 4)
    v_attn = T.window_merge(vw * sw, 4, 1, 16, 16)
    np.testing.assert_allclose(out.out.data, mixer.proj(v_attn).data, atol=1e-6)
