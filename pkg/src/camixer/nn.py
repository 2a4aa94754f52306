"""Parameter containers and the few layer types the model is built from."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from camixer import tensor as T
from camixer.rng import Rng
from camixer.tensor import Parameter, Tensor


class Module:
    """Minimal parameter tree; attributes holding Parameters/Modules are discovered by name."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        unknown = sorted(set(state) - set(own))
        if unknown:
            raise KeyError(f"unknown parameter name(s): {', '.join(unknown)}")
        missing = sorted(set(own) - set(state))
        if missing:
            raise KeyError(f"missing parameter(s): {', '.join(missing)}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise T.DimensionError(
                    f"parameter {name!r}: checkpoint shape {arr.shape} != model shape {p.shape}"
                )
            p.data = arr.astype(p.data.dtype, copy=True)

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: Rng, groups: int = 1, bias: bool = True, std=0.02):
        self.groups = groups
        self.weight = Parameter(rng.trunc_normal((cout, cin // groups, k, k), std=std))
        self.bias = Parameter(np.zeros(cout)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, groups=self.groups)


class Linear(Module):
    """``x @ W + b`` over the last axis."""

    def __init__(self, fin: int, fout: int, rng: Rng, bias: bool = True, std=0.02):
        self.weight = Parameter(rng.trunc_normal((fin, fout), std=std))
        self.bias = Parameter(np.zeros(fout)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm2d(Module):
    """Layer norm over the channel axis of NCHW features."""

    def __init__(self, channels: int, eps: float = 1e-6):
        self.eps = eps
        self.gain = Parameter(np.ones(channels))
        self.shift = Parameter(np.zeros(channels))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.shift, self.eps, axis=1)


def zero_(p: Parameter | None) -> None:
    if p is not None:
        p.data = np.zeros_like(p.data)
