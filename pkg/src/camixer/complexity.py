"""Closed-form multiply-accumulate counts and a per-layer network report.

One multiply-accumulate counts as one MAdd; ``FlopsReport.scaled(2)`` gives
FLOP-style numbers. Softmax, normalisation and elementwise work are left out
of the analytic counts.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from camixer import macs
from camixer import tensor as T
from camixer.config import ModelConfig


def flops_conv(C: float, k: int, h: int, w: int) -> float:
    """Dense ``k x k`` convolution with ``C`` input and output channels."""
    return k * k * C * C * h * w


def conv_macs(cin: float, cout: float, k: int, h: int, w: int, groups: int = 1) -> float:
    return k * k * (cin / groups) * cout * h * w


def flops_wmsa(C: float, M: int, h: int, w: int) -> float:
    """Window self-attention including its four C x C projections."""
    return (4 * C * C + 2 * M * M * C) * h * w


def flops_camixer(C: float, k: int, M: int, gamma: float, rho: float, h: int, w: int) -> float:
    """Mixer cost at attention ratio ``gamma``; affine in ``gamma``.

    Per pixel: depthwise conv ``k^2 C``, projections plus attention
    ``2(1+gamma)C^2 + 2 gamma M^2 C``, predictor
    ``rho C (C+4) + M + 2 rho C + rho k^2 C``; plus the channel attention
    ``rho C^2`` once per image.
    """
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    rc = rho * C
    per_px = (
        k * k * C
        + 2 * (1 + gamma) * C * C
        + 2 * gamma * M * M * C
        + rc * (C + 4)
        + M
        + 2 * rc
        + rc * k * k
    )
    return per_px * h * w + rc * C


@dataclass
class Row:
    name: str
    analytic_flops: float
    analytic_params: int
    measured_macs: int | None = None


@dataclass
class FlopsReport:
    rows: list[Row]
    gamma: float
    input_hw: tuple[int, int]
    gamma_used: list[float] = field(default_factory=list)
    unit: str = "MAdds"

    @property
    def analytic_total(self) -> float:
        return sum(r.analytic_flops for r in self.rows)

    @property
    def params_total(self) -> int:
        return sum(r.analytic_params for r in self.rows)

    @property
    def measured_total(self) -> int | None:
        if any(r.measured_macs is None for r in self.rows):
            return None
        return sum(r.measured_macs for r in self.rows)

    def scaled(self, factor: int) -> "FlopsReport":
        rows = [
            Row(r.name, r.analytic_flops * factor, r.analytic_params,
                None if r.measured_macs is None else r.measured_macs * factor)
            for r in self.rows
        ]
        unit = "FLOPs" if factor == 2 else f"{factor}x MAdds"
        return FlopsReport(rows, self.gamma, self.input_hw, list(self.gamma_used), unit)

    def to_dict(self) -> dict:
        return {
            "unit": self.unit,
            "gamma": self.gamma,
            "input_hw": list(self.input_hw),
            "rows": [vars(r) for r in self.rows],
            "totals": {
                "analytic_flops": self.analytic_total,
                "analytic_params": self.params_total,
                "measured_macs": self.measured_total,
            },
            "gamma_used": self.gamma_used,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_table(self) -> str:
        head = f"{'layer':<24}{'analytic (' + self.unit + ')':>22}{'params':>12}{'measured':>18}"
        lines = [head, "-" * len(head)]
        for r in self.rows:
            meas = "-" if r.measured_macs is None else f"{r.measured_macs:,}"
            lines.append(f"{r.name:<24}{r.analytic_flops:>22,.0f}{r.analytic_params:>12,}{meas:>18}")
        lines.append("-" * len(head))
        meas = "-" if self.measured_total is None else f"{self.measured_total:,}"
        lines.append(f"{'total':<24}{self.analytic_total:>22,.0f}{self.params_total:>12,}{meas:>18}")
        return "\n".join(lines)


def padded_hw(cfg: ModelConfig, h: int, w: int) -> tuple[int, int]:
    M = cfg.window
    return h + (-h) % M, w + (-w) % M


def _row_of(scope_path: str) -> str:
    parts = scope_path.split("/")
    if parts[0].startswith("block") and len(parts) > 1 and parts[1] in ("ffn", "tail"):
        return f"{parts[0]}/{parts[1]}"
    if parts[0].startswith("block"):
        return f"{parts[0]}/mixer"
    return parts[0]


def _param_rows(model) -> dict[str, int]:
    counts: dict[str, int] = defaultdict(int)
    tails = model.cfg.group_tails
    for name, p in model.named_parameters():
        parts = name.split(".")
        if parts[0] == "blocks":
            i = int(parts[1]) + 1
            key = "ffn" if parts[2] == "ffn" else "mixer"
            counts[f"block{i}/{key}"] += p.data.size
        elif parts[0] == "tails":
            counts[f"block{tails[int(parts[1])]}/tail"] += p.data.size
        else:
            counts[parts[0]] += p.data.size
    return counts


def model_report(cfg: ModelConfig, gamma: float, input_hw: tuple[int, int], measure: bool = False, seed: int = 0) -> FlopsReport:
    """Per-layer accounting for the whole network on an LR input of ``input_hw``.

    Counts use the reflect-padded size the network actually processes. With
    ``measure=True`` a top-K forward at ``gamma`` fills ``measured_macs``.
    """
    from camixer.network import CAMixerSR

    h, w = padded_hw(cfg, *input_hw)
    C, M, s = cfg.channels, cfg.window, cfg.scale
    rc = cfg.rho * C
    model = CAMixerSR(cfg, seed=seed)
    params = _param_rows(model)

    rows = [Row("shallow", conv_macs(cfg.in_channels, C, 3, h, w), params["shallow"])]
    rows.append(Row("global_predictor", conv_macs(C, rc, 3, h, w) + conv_macs(rc, 2, 3, h, w), params["global_predictor"]))
    tails = set(cfg.group_tails)
    for i in range(1, cfg.num_blocks + 1):
        rows.append(Row(f"block{i}/mixer", flops_camixer(C, 3, M, gamma, cfg.rho, h, w), params[f"block{i}/mixer"]))
        rows.append(Row(f"block{i}/ffn", 2 * cfg.ffn_expansion * C * C * h * w, params[f"block{i}/ffn"]))
        if i in tails:
            rows.append(Row(f"block{i}/tail", flops_conv(C, 3, h, w), params[f"block{i}/tail"]))
    rows.append(Row("reconstruct", conv_macs(C, cfg.in_channels * s * s, 3, h, w), params["reconstruct"]))

    report = FlopsReport(rows, gamma, tuple(input_hw))
    if measure:
        counts, gammas = measure_macs(model, input_hw, gamma, seed)
        for r in rows:
            r.measured_macs = int(counts.get(r.name, 0))
        report.gamma_used = gammas
    else:
        report.gamma_used = [gamma] * cfg.num_blocks
    return report


def measure_macs(model, input_hw: tuple[int, int], gamma: float | None, seed: int = 0) -> tuple[dict[str, int], list[float]]:
    """Run one instrumented inference forward; returns MACs per report row and per-block gamma."""
    h, w = input_hw
    x = np.random.default_rng(seed).random((1, model.cfg.in_channels, h, w))
    with T.no_grad(), macs.MacCounter() as counter:
        res = model.forward(T.Tensor(x, dtype=np.float32), gamma_target=gamma)
    rows: dict[str, int] = defaultdict(int)
    for path, n in counter.by_scope.items():
        rows[_row_of(path)] += n
    return dict(rows), res.gamma_values()
