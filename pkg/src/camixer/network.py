"""CAMixerSR backbone and its checkpoint format."""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass

import numpy as np

from camixer import macs
from camixer import tensor as T
from camixer.config import ConfigError, ModelConfig, model_config_from_dict
from camixer.mixer import CAMixer, RoutingPlan
from camixer.nn import Conv2d, LayerNorm2d, Module
from camixer.predictor import GlobalPredictor, build_window_condition
from camixer.rng import Rng
from camixer.tensor import Tensor


class FFN(Module):
    """1x1 expand -> GELU -> 1x1 contract."""

    def __init__(self, channels: int, expansion: int, rng: Rng):
        self.fc1 = Conv2d(channels, channels * expansion, 1, rng)
        self.fc2 = Conv2d(channels * expansion, channels, 1, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class Block(Module):
    def __init__(self, cfg: ModelConfig, rng: Rng):
        self.mixer = CAMixer(cfg, rng)
        self.norm1 = LayerNorm2d(cfg.channels)
        self.ffn = FFN(cfg.channels, cfg.ffn_expansion, rng)
        self.norm2 = LayerNorm2d(cfg.channels)


@dataclass
class ForwardResult:
    image: Tensor
    gammas: list  # per-block realised ratio; Tensors in training, floats otherwise
    plans: list[RoutingPlan]

    def gamma_values(self) -> list[float]:
        return [float(g.data) if isinstance(g, Tensor) else float(g) for g in self.gammas]


class CAMixerSR(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = Rng(seed)
        C, s = cfg.channels, cfg.scale
        self.shallow = Conv2d(cfg.in_channels, C, 3, rng)
        self.global_predictor = GlobalPredictor(cfg, rng)
        self.blocks = [Block(cfg, rng) for _ in range(cfg.num_blocks)]
        self.tails = [Conv2d(C, C, 3, rng) for _ in cfg.groups]
        self.reconstruct = Conv2d(C, cfg.in_channels * s * s, 3, rng)

    def __call__(self, lr: Tensor, **kw) -> ForwardResult:
        return self.forward(lr, **kw)

    def forward(
        self,
        lr: Tensor,
        training: bool = False,
        rng: Rng | None = None,
        gamma_target: float | None = None,
        temperature: float = 1.0,
        extra: Tensor | None = None,
    ) -> ForwardResult:
        cfg = self.cfg
        if training and rng is None:
            raise ValueError("training forward needs an rng for gumbel sampling")
        B, _, H, W = lr.shape
        M, s = cfg.window, cfg.scale
        ph, pw = (-H) % M, (-W) % M
        x = T.pad_reflect(lr, ph, pw)
        if extra is not None:
            extra = T.pad_reflect(extra, ph, pw)
        Hp, Wp = H + ph, W + pw

        with macs.scope("shallow"):
            f0 = self.shallow(x)
        with macs.scope("global_predictor"):
            cg = self.global_predictor(f0)
        cw = build_window_condition(Hp, Wp, M)
        cw = T.Tensor(cw.data, dtype=f0.dtype)

        gammas, plans = [], []
        f = f0
        group_input = f0
        tails = cfg.group_tails
        for i, block in enumerate(self.blocks, start=1):
            with macs.scope(f"block{i}"):
                mixed = block.mixer(
                    f, cg, cw, training=training, rng=rng, gamma_target=gamma_target,
                    temperature=temperature, extra=extra,
                )
                f = block.norm1(mixed.out + f)
                with macs.scope("ffn"):
                    f = block.norm2(block.ffn(f) + f)
                if i in tails:
                    j = tails.index(i)
                    with macs.scope("tail"):
                        f = self.tails[j](f) + group_input
                    group_input = f
            gammas.append(mixed.gamma)
            plans.append(mixed.plan)

        with macs.scope("reconstruct"):
            out = T.pixel_shuffle(self.reconstruct(f + f0), s)
        if ph or pw:
            out = out[:, :, : H * s, : W * s]
        return ForwardResult(out, gammas, plans)


# -- checkpoints ------------------------------------------------------------

MAGIC = b"CAMX0001"


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class UnknownParameterError(CheckpointError, KeyError):
    pass


def _config_json(cfg: ModelConfig) -> bytes:
    return json.dumps(dataclasses.asdict(cfg), sort_keys=True).encode()


def save_checkpoint(model: CAMixerSR, path: str) -> None:
    """Write magic, config JSON, then a name-indexed table of float32 LE arrays.

    Layout: ``MAGIC | u32 len | config | u32 count | (u16 len, name, u8 ndim,
    u32 dims..., float32 data)*``.
    """
    blob = _config_json(model.cfg)
    params = sorted(model.named_parameters())
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(params)))
        for name, p in params:
            raw = name.encode()
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", p.ndim))
            fh.write(struct.pack(f"<{p.ndim}I", *p.shape))
            fh.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointTruncatedError(f"checkpoint truncated at byte {self.pos} (needed {n} more)")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path: str) -> tuple[dict[str, np.ndarray], ModelConfig]:
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    magic = r.take(len(MAGIC)) if len(r.buf) >= len(MAGIC) else r.buf
    if magic != MAGIC:
        raise CheckpointVersionError(f"bad checkpoint magic {magic!r}, expected {MAGIC!r}")
    (n,) = r.unpack("<I")
    try:
        cfg = model_config_from_dict(json.loads(r.take(n)))
    except (json.JSONDecodeError, ConfigError) as exc:
        raise CheckpointError(f"invalid config block: {exc}") from None
    (count,) = r.unpack("<I")
    params = {}
    for _ in range(count):
        (ln,) = r.unpack("<H")
        name = r.take(ln).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        size = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
    if r.pos != len(r.buf):
        raise CheckpointError(f"{len(r.buf) - r.pos} trailing bytes after parameter table")
    return params, cfg


def load_into(model: CAMixerSR, params: dict[str, np.ndarray]) -> None:
    """Copy checkpoint arrays into ``model``; distinct errors for unknown names and shapes."""
    own = dict(model.named_parameters())
    unknown = sorted(set(params) - set(own))
    if unknown:
        raise UnknownParameterError(f"unknown parameter name(s) in checkpoint: {', '.join(unknown)}")
    missing = sorted(set(own) - set(params))
    if missing:
        raise CheckpointError(f"checkpoint lacks parameter(s): {', '.join(missing)}")
    model.load_state_dict(params)


def model_from_checkpoint(path: str) -> CAMixerSR:
    params, cfg = load_checkpoint(path)
    model = CAMixerSR(cfg)
    load_into(model, params)
    return model
