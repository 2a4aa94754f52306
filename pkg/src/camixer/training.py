"""Losses, AdamW and the training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from camixer import tensor as T
from camixer.config import LossConfig, TrainConfig
from camixer.network import CAMixerSR
from camixer.rng import Rng
from camixer.tensor import DimensionError, Parameter, Tensor

log = logging.getLogger(__name__)


class NumericAbort(FloatingPointError):
    """Training produced a non-finite loss."""


def _same_shape(pred: Tensor, target) -> None:
    if tuple(pred.shape) != tuple(np.shape(_data(target))):
        raise DimensionError(f"loss shape mismatch: {pred.shape} vs {np.shape(_data(target))}")


def _data(x):
    return x.data if isinstance(x, Tensor) else x


def l1_loss(pred: Tensor, target) -> Tensor:
    """Mean absolute error over batch, channels and pixels."""
    _same_shape(pred, target)
    return T.absolute(pred - np.asarray(_data(target), dtype=pred.dtype)).mean()


def ws_weights(H: int) -> np.ndarray:
    """Latitude weight of each of the ``H`` rows of an equirectangular image."""
    rows = np.arange(H, dtype=np.float64)
    return np.cos((rows + 0.5 - H / 2) / H * np.pi)


def ws_weighted_l1(pred: Tensor, target, weights: np.ndarray | None = None) -> Tensor:
    """Row-weighted L1; ``weights`` overrides the latitude weights (length H)."""
    _same_shape(pred, target)
    H = pred.shape[-2]
    w = ws_weights(H) if weights is None else np.asarray(weights, dtype=np.float64)
    w = w.astype(pred.dtype).reshape(H, 1)
    return (T.absolute(pred - np.asarray(_data(target), dtype=pred.dtype)) * w).mean()


def ratio_loss(gammas: Sequence, gamma_ref: float, form: str = "literal") -> Tensor:
    """Penalty steering the per-block attention ratios.

    ``literal``: ``(gamma_ref * (1 - 2 * mean(gammas)))**2``, zero at mean 0.5.
    ``mean-target``: ``(mean(gammas) - gamma_ref)**2``.
    """
    if not gammas:
        raise ValueError("ratio_loss needs at least one gamma")
    terms = [g if isinstance(g, Tensor) else T.Tensor(g) for g in gammas]
    mean = terms[0]
    for g in terms[1:]:
        mean = mean + g
    mean = mean * (1.0 / len(terms))
    if form == "literal":
        return ((1.0 - mean * 2.0) * gamma_ref) ** 2
    if form == "mean-target":
        return (mean - gamma_ref) ** 2
    raise ValueError(f"unknown ratio loss form {form!r}")


class AdamW:
    """Adam with decoupled weight decay; decay applies to weights (ndim >= 2) only."""

    def __init__(self, params: Sequence[Parameter], lr: float, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-4):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay and p.ndim >= 2:
                update = update + self.weight_decay * p.data
            if self.lr:
                p.data = (p.data - self.lr * update).astype(p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Base rate halved at each milestone already passed."""
    halvings = sum(step >= m for m in cfg.milestone_steps())
    return cfg.lr * 0.5**halvings


@dataclass
class StepStats:
    step: int
    loss: float
    l1: float
    ratio: float
    gammas: list[float]

    @property
    def mean_gamma(self) -> float:
        return float(np.mean(self.gammas))


def train_step(
    lr_batch: np.ndarray,
    hr_batch: np.ndarray,
    model: CAMixerSR,
    opt: AdamW,
    loss_cfg: LossConfig,
    rng: Rng,
    step: int = 0,
    temperature: float = 1.0,
) -> StepStats:
    """One AdamW update on reconstruction + ratio loss."""
    if hr_batch.shape[-1] != lr_batch.shape[-1] * model.cfg.scale:
        raise DimensionError(f"LR/HR batch shapes {lr_batch.shape}/{hr_batch.shape} disagree with scale {model.cfg.scale}")
    opt.zero_grad()
    res = model.forward(T.Tensor(lr_batch), training=True, rng=rng, temperature=temperature)
    if loss_cfg.ws_weighted:
        rec = ws_weighted_l1(res.image, hr_batch)
    else:
        rec = l1_loss(res.image, hr_batch)
    ratio = ratio_loss(res.gammas, loss_cfg.gamma_ref, loss_cfg.ratio_loss_form)
    loss = rec + ratio * loss_cfg.ratio_weight
    value = float(loss.data)
    if not math.isfinite(value):
        raise NumericAbort(
            f"non-finite loss at step {step}: lr={opt.lr:g} l1={float(rec.data)!r} ratio={float(ratio.data)!r}"
        )
    loss.backward()
    opt.step()
    return StepStats(step, value, float(rec.data), float(ratio.data), res.gamma_values())


# -- data ------------------------------------------------------------------

@dataclass
class PairSet:
    """In-memory LR/HR pairs as float ``[C, H, W]`` arrays."""

    lr: list[np.ndarray]
    hr: list[np.ndarray]
    scale: int
    names: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.lr)

    def batches(self, batch_size: int, hr_patch: int, rng: Rng) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        """Endless random aligned crops; ``hr_patch`` is the HR crop size."""
        s = self.scale
        lp = hr_patch // s
        while True:
            lrs, hrs = [], []
            for _ in range(batch_size):
                i = int(rng.integers(0, len(self.lr)))
                lr, hr = self.lr[i], self.hr[i]
                y = int(rng.integers(0, lr.shape[1] - lp + 1))
                x = int(rng.integers(0, lr.shape[2] - lp + 1))
                lrs.append(lr[:, y : y + lp, x : x + lp])
                hrs.append(hr[:, y * s : (y + lp) * s, x * s : (x + lp) * s])
            yield np.stack(lrs).astype(np.float32), np.stack(hrs).astype(np.float32)


def synthetic_pairs(kinds: Sequence[str], count: int, size: int, scale: int, rng: Rng) -> PairSet:
    """``count`` generated pairs cycling through ``kinds``."""
    from camixer.imaging import make_synthetic_pair

    lrs, hrs, names = [], [], []
    for i in range(count):
        kind = kinds[i % len(kinds)]
        lr, hr = make_synthetic_pair(kind, size, scale, rng)
        lrs.append(lr)
        hrs.append(hr)
        names.append(f"{kind}-{i:03d}")
    return PairSet(lrs, hrs, scale, names)


def load_pair_dir(path: str, scale: int) -> PairSet:
    """HR images (``.ppm``/``.pgm``) from ``path``; LR made by bicubic downsampling."""
    import os

    from camixer.imaging import bicubic_downsample, crop_to_multiple, read_image, to_float

    if not os.path.isdir(path):
        raise FileNotFoundError(f"data directory not found: {path}")
    names = sorted(f for f in os.listdir(path) if f.lower().endswith((".ppm", ".pgm")))
    if not names:
        raise FileNotFoundError(f"no .ppm/.pgm images in {path}")
    lrs, hrs = [], []
    for name in names:
        hr = crop_to_multiple(to_float(read_image(os.path.join(path, name))), scale)
        lrs.append(bicubic_downsample(hr, scale))
        hrs.append(hr)
    return PairSet(lrs, hrs, scale, names)


def evaluate_psnr(model: CAMixerSR, pairs: PairSet, gamma_target: float | None = None) -> float:
    from camixer.imaging import psnr

    vals = []
    with T.no_grad():
        for lr, hr in zip(pairs.lr, pairs.hr):
            sr = model.forward(T.Tensor(lr[None]), gamma_target=gamma_target).image.data[0]
            vals.append(psnr(np.clip(sr, 0, 1), hr))
    return float(np.mean(vals))


METRIC_FIELDS = ("step", "l1", "ratio_loss", "mean_gamma", "psnr_val")


def train(
    model: CAMixerSR,
    data: PairSet,
    cfg: TrainConfig,
    val: PairSet | None = None,
    metrics_path: str | None = None,
    eval_every: int = 0,
    on_milestone: Callable[[int], None] | None = None,
) -> list[StepStats]:
    """Run ``cfg.steps`` updates; optionally stream metrics to CSV.

    ``psnr_val`` is filled every ``eval_every`` steps (and at the last step)
    when a validation set is given, and left blank otherwise.
    """
    rng = Rng(cfg.seed)
    data_rng, noise_rng = rng.spawn(1), rng.spawn(2)
    opt = AdamW(model.parameters(), cfg.lr, cfg.betas, weight_decay=cfg.weight_decay)
    milestones = set(cfg.milestone_steps())
    batches = data.batches(cfg.batch_size, cfg.patch_size, data_rng)
    history: list[StepStats] = []
    fh = open(metrics_path, "w", newline="") if metrics_path else None
    writer = csv.writer(fh) if fh else None
    if writer:
        writer.writerow(METRIC_FIELDS)
    try:
        for step in range(1, cfg.steps + 1):
            opt.lr = lr_at(step - 1, cfg)
            lr_b, hr_b = next(batches)
            stats = train_step(lr_b, hr_b, model, opt, cfg.loss, noise_rng, step, cfg.temperature)
            history.append(stats)
            val_psnr = ""
            if val is not None and eval_every and (step % eval_every == 0 or step == cfg.steps):
                val_psnr = f"{evaluate_psnr(model, val):.6f}"
            if writer and (step % cfg.log_every == 0 or val_psnr):
                writer.writerow([step, f"{stats.l1:.8f}", f"{stats.ratio:.8f}", f"{stats.mean_gamma:.6f}", val_psnr])
            if on_milestone and (step in milestones or (cfg.checkpoint_every and step % cfg.checkpoint_every == 0)):
                on_milestone(step)
            if step % 100 == 0:
                log.info("step %d l1=%.5f ratio=%.5f gamma=%.3f", step, stats.l1, stats.ratio, stats.mean_gamma)
    finally:
        if fh:
            fh.close()
    return history
