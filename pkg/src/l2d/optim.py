"""Adam with decoupled weight decay, and the cosine one-cycle schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class NumericalError(RuntimeError):
    """Training produced a non-finite loss or gradient."""


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray | None], state: AdamState,
              lr: float, weight_decay: float = 0.0) -> AdamState:
    """One bias-corrected Adam update, in place.

    Decay is decoupled and applied before the Adam delta:
    ``p <- p - lr*wd*p``, then ``p <- p - lr * m_hat / (sqrt(v_hat) + eps)``.
    A ``None`` gradient counts as zero.  Nothing is modified if any gradient
    is non-finite.
    """
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    grads = [np.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    for p, g in zip(params, grads):
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericalError("non-finite gradient; step aborted")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        dt = p.dtype
        m *= dt.type(b1)
        m += dt.type(1 - b1) * g
        v *= dt.type(b2)
        v += dt.type(1 - b2) * g * g
        if weight_decay:
            p -= dt.type(lr * weight_decay) * p
        denom = np.sqrt(v / dt.type(c2)) + dt.type(state.eps)
        p -= dt.type(lr / c1) * m / denom
    return state


def one_cycle_lr(step: int, total_steps: int, max_lr: float, warmup_frac: float = 0.3,
                 div: float = 25.0, final_div: float = 1e4) -> float:
    """Cosine warm-up from ``max_lr/div`` to ``max_lr``, then cosine decay to
    ``max_lr/final_div`` at the last step."""
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    start = max_lr / div
    end = max_lr / final_div
    peak = int(math.floor(warmup_frac * total_steps))
    peak = min(peak, total_steps - 1)
    if step == peak:
        return float(max_lr)
    if step < peak:
        frac = step / peak
        return float(start + (max_lr - start) * 0.5 * (1 - math.cos(math.pi * frac)))
    frac = (step - peak) / (total_steps - 1 - peak)
    return float(end + (max_lr - end) * 0.5 * (1 + math.cos(math.pi * frac)))
