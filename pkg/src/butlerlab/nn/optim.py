from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Parameter


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_param(cls, param: Parameter, **hyper) -> "AdamState":
        return cls(np.zeros_like(param.data), np.zeros_like(param.data), **hyper)


def adam_step(param: Parameter, state: AdamState) -> None:
    """One bias-corrected Adam update in place; clears ``param.grad``."""
    g = param.grad
    state.step += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * g
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * (g * g)
    mhat = state.m / (1.0 - state.beta1**state.step)
    vhat = state.v / (1.0 - state.beta2**state.step)
    param.data -= (state.lr * mhat / (np.sqrt(vhat) + state.eps)).astype(param.data.dtype)
    param.zero_grad()


@dataclass
class Adam:
    params: list[Parameter]
    lr: float = 3e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    states: list[AdamState] = field(init=False)

    def __post_init__(self):
        self.states = [
            AdamState.for_param(p, lr=self.lr, beta1=self.betas[0], beta2=self.betas[1], eps=self.eps)
            for p in self.params
        ]

    def step(self) -> None:
        for p, s in zip(self.params, self.states):
            adam_step(p, s)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()
