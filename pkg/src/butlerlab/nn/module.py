from __future__ import annotations

from typing import Iterator

import numpy as np

from .rng import Rng
from .tensor import Parameter, Tensor, default_dtype, matmul


class Module:
    """Holds parameters in insertion order; child modules are walked recursively."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in vars(self).items():
            if isinstance(val, Parameter):
                yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{key}.")
            elif isinstance(val, list):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.data.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.data.shape}")
            p.data = arr.astype(p.data.dtype, copy=True)
            p.grad = np.zeros_like(p.data)

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = False

    def param_count(self) -> int:
        return sum(p.data.size for p in self.parameters())


def uniform_fan_in(rng: Rng, shape, fan_in: int, name: str) -> Parameter:
    bound = 1.0 / np.sqrt(fan_in)
    return Parameter(rng.uniform(shape, -bound, bound, dtype=np.float64).astype(default_dtype()), name=name)


class Linear(Module):
    def __init__(self, rng: Rng, fan_in: int, fan_out: int, bias: bool = True, name: str = "linear"):
        self.weight = uniform_fan_in(rng, (fan_in, fan_out), fan_in, f"{name}.weight")
        self.bias = uniform_fan_in(rng, (fan_out,), fan_in, f"{name}.bias") if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y
