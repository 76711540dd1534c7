"""Adam and the halving + cosine learning-rate / lambda schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..tensor_core import ParamStore


class NumericalError(FloatingPointError):
    pass


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(store: ParamStore, state: AdamState, lr: float) -> AdamState:
    """Bias-corrected Adam update over distinct parameters in store order.

    Gradients are checked for NaN/Inf before anything is modified and zeroed
    after the update.
    """
    params = store.unique()
    for name, p in params:
        if not np.all(np.isfinite(p.grad)):
            raise NumericalError(f"non-finite gradient in parameter {name!r}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params:
        if name not in state.m:
            state.m[name] = np.zeros_like(p.value)
            state.v[name] = np.zeros_like(p.value)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * p.grad
        v *= b2
        v += (1.0 - b2) * p.grad * p.grad
        p.value -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.grad[...] = 0.0
    return state


def lr_schedule(it: int, cfg) -> tuple[float, float]:
    """``(lr, lambda)`` at iteration ``it``.

    Both share a step envelope halved every ``cfg.halving_period`` iterations.
    Inside a period the learning rate follows a cosine from the envelope
    down to ``cfg.cosine_floor`` of it; lambda stays on the envelope. An
    optional linear warm-up scales the learning rate over the first
    ``cfg.warmup`` iterations.
    """
    if it < 0:
        raise ValueError("iteration must be non-negative")
    period = cfg.period
    k, pos = divmod(it, period)
    base = 0.5**k
    floor = cfg.cosine_floor
    mod = floor + (1.0 - floor) * 0.5 * (1.0 + math.cos(math.pi * pos / period))
    lr = cfg.lr_init * base * mod
    warm = getattr(cfg, "warmup", 0)
    if it < warm:
        lr *= (it + 1) / (warm + 1)
    return lr, cfg.lambda_init * base
