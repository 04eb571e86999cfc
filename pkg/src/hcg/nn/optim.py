from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, hyper: AdamHyper) -> AdamState:
    """Bias-corrected Adam update, in place on ``params`` (name -> ndarray)."""
    state.step += 1
    b1, b2 = hyper.beta1, hyper.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        p -= hyper.lr * (m / c1) / (np.sqrt(v / c2) + hyper.eps)
    return state


class Adam:
    """Adam over the parameters of one or more Modules."""

    def __init__(self, modules, hyper: AdamHyper | None = None):
        if not isinstance(modules, (list, tuple)):
            modules = [modules]
        self.params = {}
        for i, mod in enumerate(modules):
            for name, t in mod.named_parameters().items():
                self.params[f"{i}.{name}"] = t
        self.hyper = hyper or AdamHyper()
        self.state = AdamState()

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float((t.grad**2).sum()) for t in self.params.values() if t.grad is not None)))

    def step(self, clip_norm: float | None = None):
        grads = {k: t.grad for k, t in self.params.items() if t.grad is not None}
        if clip_norm is not None:
            total = np.sqrt(sum(float((g**2).sum()) for g in grads.values()))
            if total > clip_norm:
                grads = {k: g * (clip_norm / total) for k, g in grads.items()}
        adam_step({k: t.data for k, t in self.params.items()}, grads, self.state, self.hyper)
