"""Content-aware mixing: hard windows go through self-attention, the rest
through a cheap spatial attention, followed by a depthwise conv branch."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from camixer import macs
from camixer import tensor as T
from camixer.config import ModelConfig
from camixer.nn import Conv2d, Linear, Module
from camixer.predictor import Conditions, Predictor, PredictorOutputs
from camixer.rng import Rng
from camixer.tensor import Tensor

TRAIN = "train-soft"
TOPK = "infer-topk"
THRESHOLD = "infer-threshold"


@dataclass
class RoutingPlan:
    hard_idx: np.ndarray
    simple_idx: np.ndarray
    K: int
    gamma_actual: float
    mode: str
    # straight-through hard mask, [N, 1, 1]; only set in training mode
    mask: Tensor | None = None

    @property
    def num_windows(self) -> int:
        return len(self.hard_idx) + len(self.simple_idx)


def _plan_from_hard(hard: np.ndarray, mode: str, mask: Tensor | None = None) -> RoutingPlan:
    hard = np.asarray(hard, dtype=bool)
    hard_idx = np.flatnonzero(hard)
    simple_idx = np.flatnonzero(~hard)
    K = int(hard_idx.size)
    return RoutingPlan(hard_idx, simple_idx, K, K / max(hard.size, 1), mode, mask)


def topk_windows(score: np.ndarray, K: int) -> np.ndarray:
    """Boolean mask of the K highest scores; ties go to the lower index."""
    order = np.argsort(-np.asarray(score, dtype=np.float64), kind="stable")
    hard = np.zeros(score.shape[0], dtype=bool)
    hard[order[:K]] = True
    return hard


def route(
    mask_logits: Tensor,
    gamma_target: float | None = None,
    training: bool = False,
    rng: Rng | None = None,
    temperature: float = 1.0,
) -> RoutingPlan:
    """Split the windows of one image into attention and convolution sets.

    ``mask_logits`` is ``[N, 2]`` with column 0 scoring the attention branch.
    Training draws a straight-through Gumbel one-hot per window. Inference
    keeps the ``round(gamma_target * N)`` windows with the largest logit
    difference, or, with ``gamma_target=None``, every window whose attention
    probability exceeds one half.
    """
    N = mask_logits.shape[0]
    if training:
        onehot = T.gumbel_softmax(mask_logits, temperature, rng, hard=True)
        mask = onehot[:, 0:1].reshape(N, 1, 1)
        return _plan_from_hard(onehot.data[:, 0] > 0.5, TRAIN, mask)
    diff = mask_logits.data[:, 0].astype(np.float64) - mask_logits.data[:, 1]
    if gamma_target is None:
        return _plan_from_hard(diff > 0, THRESHOLD)
    if not 0.0 <= gamma_target <= 1.0:
        raise ValueError(f"gamma_target must lie in [0, 1], got {gamma_target}")
    K = int(math.floor(gamma_target * N + 0.5))
    return _plan_from_hard(topk_windows(diff, K), TOPK)


def window_attention(xw: Tensor, vw: Tensor, wq: Tensor, wk: Tensor, heads: int = 1) -> Tensor:
    """softmax(Q K^T / sqrt(d)) V per window; Q, K from ``xw``, values ``vw``."""
    n, t, C = xw.shape
    d = C // heads
    with macs.scope("attention"):
        q = T.matmul(xw, wq)
        k = T.matmul(xw, wk)
        if heads > 1:
            q = q.reshape(n, t, heads, d).permute(0, 2, 1, 3)
            k = k.reshape(n, t, heads, d).permute(0, 2, 1, 3)
            v = vw.reshape(n, t, heads, d).permute(0, 2, 1, 3)
        else:
            v = vw
        attn = T.softmax(T.matmul(q, k.transpose(-2, -1)) * (1.0 / math.sqrt(d)), axis=-1)
        out = T.matmul(attn, v)
    if heads > 1:
        out = out.permute(0, 2, 1, 3).reshape(n, t, C)
    return out


def simple_branch(vw: Tensor, sw: Tensor) -> Tensor:
    """Elementwise spatial attention on window values (``sw`` broadcasts over channels)."""
    return vw * sw


@dataclass
class MixerOutput:
    out: Tensor
    gamma: Tensor | float
    plan: RoutingPlan
    guidance: PredictorOutputs


class CAMixer(Module):
    def __init__(self, cfg: ModelConfig, rng: Rng):
        self.cfg = cfg
        C = cfg.channels
        self.value = Conv2d(C, C, 1, rng)
        self.wq = Linear(C, C, rng, bias=False)
        self.wk = Linear(C, C, rng, bias=False)
        self.dw1 = Conv2d(C, C, 3, rng, groups=C)
        self.dw2 = Conv2d(C, C, 3, rng, groups=C)
        self.proj = Conv2d(C, C, 1, rng)
        self.predictor = Predictor(cfg, rng)

    def plan(self, logits: Tensor, training: bool, rng, gamma_target, temperature) -> RoutingPlan:
        """Route every image of the batch and merge into one plan over ``B * nW`` windows."""
        B, nW, _ = logits.shape
        plans = [route(logits[b], gamma_target, training, rng, temperature) for b in range(B)]
        hard = np.concatenate([p.hard_idx + b * nW for b, p in enumerate(plans)])
        simple = np.concatenate([p.simple_idx + b * nW for b, p in enumerate(plans)])
        mask = T.concat([p.mask for p in plans], axis=0) if training else None
        K = int(hard.size)
        return RoutingPlan(hard, simple, K, K / (B * nW), plans[0].mode, mask)

    def __call__(
        self,
        x: Tensor,
        cond_global: Tensor,
        cond_window: Tensor,
        training: bool = False,
        rng: Rng | None = None,
        gamma_target: float | None = None,
        temperature: float = 1.0,
        fixed_mask: np.ndarray | None = None,
        extra: Tensor | None = None,
    ) -> MixerOutput:
        """Mix ``x`` (``[B, C, H, W]``, H and W multiples of the window).

        ``fixed_mask`` (bool, ``[B * nW]``) overrides the predictor's routing;
        with ``training=True`` it is applied by mask multiplication, otherwise
        through gather/scatter.
        """
        cfg = self.cfg
        M = cfg.window
        B, C, H, W = x.shape
        with macs.scope("value"):
            v = self.value(x)
        with macs.scope("predictor"):
            guide = self.predictor(Conditions(v, cond_global, cond_window, extra))

        if fixed_mask is not None:
            hard = np.asarray(fixed_mask, dtype=bool).reshape(-1)
            mask = T.Tensor(hard.reshape(-1, 1, 1), dtype=x.dtype) if training else None
            plan = _plan_from_hard(hard, TRAIN if training else "fixed", mask)
        else:
            plan = self.plan(guide.mask_logits, training, rng, gamma_target, temperature)

        xt = T.grid_sample_bilinear(x, guide.offsets) if cfg.use_offsets and cfg.offset_scale > 0 else x
        xw = T.window_partition(xt, M)
        vw = T.window_partition(v, M)
        sw = T.window_partition(guide.spatial_attn, M)
        N = xw.shape[0]

        if training:
            m = plan.mask
            hard_out = window_attention(xw * m, vw * m, self.wq.weight, self.wk.weight, cfg.heads)
            v_attn = hard_out + simple_branch(vw * (1.0 - m), sw)
            gamma = m.mean()
        else:
            pieces = []
            if plan.K:
                xh = T.gather_windows(xw, plan.hard_idx)
                vh = T.gather_windows(vw, plan.hard_idx)
                pieces.append((window_attention(xh, vh, self.wq.weight, self.wk.weight, cfg.heads), plan.hard_idx))
            if plan.simple_idx.size:
                vs = T.gather_windows(vw, plan.simple_idx)
                ss = T.gather_windows(sw, plan.simple_idx)
                pieces.append((simple_branch(vs, ss), plan.simple_idx))
            v_attn = T.scatter_windows(pieces, N)
            gamma = plan.gamma_actual

        v_attn = T.window_merge(v_attn, M, B, H, W)
        with macs.scope("conv"):
            local = self.dw2(T.gelu(self.dw1(v_attn)))
        v_conv = local * guide.channel_attn + v_attn
        with macs.scope("proj"):
            out = self.proj(v_conv)
        return MixerOutput(out, gamma, plan, guide)
