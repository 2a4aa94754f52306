"""Guidance signals for the mixer: offsets, window mask logits, and the
spatial/channel attentions used by the convolutional branch."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from camixer import tensor as T
from camixer.config import ModelConfig
from camixer.nn import Conv2d, Linear, Module, zero_
from camixer.rng import Rng
from camixer.tensor import DimensionError, Tensor


@dataclass
class Conditions:
    local: Tensor  # V, [B, C, H, W]
    global_: Tensor  # [B, 2, H, W]
    window: Tensor  # [1 or B, 2, H, W]
    extra: Tensor | None = None  # optional distortion map, [B, 1, H, W]


@dataclass
class PredictorOutputs:
    offsets: Tensor  # [B, 2, H, W], pixels, channel 0 = dx
    mask_logits: Tensor  # [B, HW/M^2, 2], column 0 = attention
    spatial_attn: Tensor  # [B, 1, H, W]
    channel_attn: Tensor  # [B, C, 1, 1]


def build_window_condition(H: int, W: int, M: int) -> Tensor:
    """Per-window linear ramps from -1 to 1: channel 0 along y, channel 1 along x."""
    if H % M or W % M:
        raise DimensionError(f"window condition: {H}x{W} not divisible by window {M}")
    ramp = np.linspace(-1.0, 1.0, M)
    ys = np.tile(ramp, H // M)
    xs = np.tile(ramp, W // M)
    cw = np.stack([np.broadcast_to(ys[:, None], (H, W)), np.broadcast_to(xs[None, :], (H, W))])
    return Tensor(cw[None])


class GlobalPredictor(Module):
    """Two 3x3 convolutions, C -> rho*C -> 2, shared by every mixer."""

    def __init__(self, cfg: ModelConfig, rng: Rng):
        rc = cfg.reduced_channels
        self.conv1 = Conv2d(cfg.channels, rc, 3, rng)
        self.conv2 = Conv2d(rc, 2, 3, rng)

    def __call__(self, f0: Tensor) -> Tensor:
        return self.conv2(T.gelu(self.conv1(f0)))


class Predictor(Module):
    def __init__(self, cfg: ModelConfig, rng: Rng):
        self.cfg = cfg
        C, rc, M = cfg.channels, cfg.reduced_channels, cfg.window
        self.head_pw = Conv2d(C + 4 + cfg.extra_cond_channels, rc, 1, rng)
        self.head_dw = Conv2d(rc, rc, 3, rng, groups=rc)
        self.offsets = Conv2d(rc, 2, 1, rng)
        # offsets start at zero so training begins un-warped
        zero_(self.offsets.weight)
        self.reduce = Linear(rc, M * M, rng)
        self.mask = Linear(M * M, 2, rng)
        self.sa = Conv2d(rc, 1, 3, rng)
        self.ca = Linear(rc, C, rng)

    def __call__(self, cond: Conditions) -> PredictorOutputs:
        cfg = self.cfg
        v = cond.local
        B, C, H, W = v.shape
        if C != cfg.channels:
            raise DimensionError(f"predictor expects {cfg.channels} local channels, got {C}")
        M = cfg.window
        cg = cond.global_ if cfg.use_global_cond else T.Tensor(np.zeros((B, 2, H, W)), dtype=v.dtype)
        cw = cond.window if cfg.use_window_cond else T.Tensor(np.zeros((1, 2, H, W)), dtype=v.dtype)
        if cw.shape[0] != B:
            cw = T.Tensor(np.broadcast_to(cw.data, (B, 2, H, W)), dtype=v.dtype)
        parts = [v, cg, cw]
        if cfg.extra_cond_channels:
            if cond.extra is None:
                raise DimensionError("model expects an extra condition map but none was given")
            parts.append(cond.extra)
        f = self.head_dw(T.gelu(self.head_pw(T.concat(parts, axis=1))))

        if cfg.use_offsets and cfg.offset_scale > 0:
            offsets = T.tanh(self.offsets(f)) * cfg.offset_scale
        else:
            offsets = T.Tensor(np.zeros((B, 2, H, W)), dtype=v.dtype)

        windows = T.window_partition(f, M)  # [B*nW, M*M, rc]
        pooled = windows.mean(axis=1)
        logits = self.mask(T.gelu(self.reduce(pooled)))
        logits = logits.reshape(B, (H // M) * (W // M), 2)

        if cfg.use_spatial_attn:
            spatial = T.sigmoid(self.sa(f))
        else:
            spatial = T.Tensor(np.ones((B, 1, H, W)), dtype=v.dtype)
        if cfg.use_channel_attn:
            channel = T.sigmoid(self.ca(f.mean(axis=(2, 3)))).reshape(B, C, 1, 1)
        else:
            channel = T.Tensor(np.ones((B, C, 1, 1)), dtype=v.dtype)
        return PredictorOutputs(offsets, logits, spatial, channel)
