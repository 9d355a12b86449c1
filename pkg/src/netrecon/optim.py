"""Decoupled-weight-decay Adam and the warmup-stable-decay LR schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor


@dataclass
class LrSchedule:
    """Piecewise-linear warmup / plateau / decay schedule.

    Linear ramp 0 -> peak over the warmup span, constant peak over the
    stable span, linear decay peak -> 0 over the decay span.
    """

    peak_lr: float
    total_steps: int
    warmup_frac: float = 0.1
    stable_frac: float = 0.6
    decay_frac: float = 0.3

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if min(self.warmup_frac, self.stable_frac, self.decay_frac) < 0:
            raise ValueError("schedule fractions must be nonnegative")
        if abs(self.warmup_frac + self.stable_frac + self.decay_frac - 1.0) > 1e-12:
            raise ValueError("schedule fractions must sum to 1")
        self.warmup_steps = int(round(self.warmup_frac * self.total_steps))
        self.decay_steps = int(round(self.decay_frac * self.total_steps))
        self.stable_steps = self.total_steps - self.warmup_steps - self.decay_steps
        if self.stable_steps < 0:
            raise ValueError("rounded warmup+decay spans exceed total_steps")


def wsd_lr(schedule: LrSchedule, step: int) -> float:
    if not 0 <= step < schedule.total_steps:
        raise ValueError(f"step {step} outside [0, {schedule.total_steps})")
    w, s, d = schedule.warmup_steps, schedule.stable_steps, schedule.decay_steps
    peak = schedule.peak_lr
    if step < w:
        return peak * step / w
    if step < w + s:
        return peak
    return peak * (schedule.total_steps - step) / d


@dataclass
class OptimizerState:
    """Per-parameter Adam moments plus hyperparameters."""

    base_lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def init_optimizer(params: dict[str, Tensor], base_lr: float = 1e-3,
                   betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                   weight_decay: float = 0.01) -> OptimizerState:
    state = OptimizerState(base_lr=base_lr, beta1=betas[0], beta2=betas[1],
                           eps=eps, weight_decay=weight_decay)
    for name, p in params.items():
        state.m[name] = np.zeros_like(p.data)
        state.v[name] = np.zeros_like(p.data)
    return state


def adamw_step(state: OptimizerState, params: dict[str, Tensor],
               grads: dict[str, np.ndarray], lr: float) -> OptimizerState:
    """One decoupled-weight-decay Adam update, in place on `params`.

    Weight decay is applied directly to the parameters (not folded into
    the gradient), so with a zero gradient the update shrinks theta by
    exactly lr * weight_decay * theta.
    """
    if lr < 0:
        raise ValueError("lr must be >= 0")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape "
                             f"{p.data.shape} for '{name}'")
        if not np.isfinite(g).all():
            raise ArithmeticError(f"non-finite gradient for parameter '{name}'")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        p.data -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
        if state.weight_decay:
            p.data -= lr * state.weight_decay * p.data
    return state
