"""AdamW with decoupled weight decay and the one-cycle learning-rate policy."""

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, OutOfRange


@dataclass
class AdamWState:
    m: list
    v: list
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_adamw(params, beta1=0.9, beta2=0.999, eps=1e-8):
    arrays = params.arrays()
    return AdamWState(
        m=[np.zeros(a.shape, dtype=_moment_dtype(a)) for a in arrays],
        v=[np.zeros(a.shape, dtype=_moment_dtype(a)) for a in arrays],
        step_count=0,
        beta1=beta1,
        beta2=beta2,
        eps=eps,
    )


def _moment_dtype(a):
    return np.result_type(a.dtype, np.float32)


def adamw_step(params, grads, state, lr, weight_decay):
    """One AdamW update. Returns ``(new_params, new_state)``; inputs are untouched.

    Arithmetic runs in the parameters' float dtype. The decay term uses the
    pre-step value: ``theta' = theta * (1 - lr * wd) - lr * m_hat / (sqrt(v_hat) + eps)``.
    """
    if lr < 0 or weight_decay < 0:
        raise ValueError("lr and weight_decay must be non-negative")
    if not params.same_shape(grads):
        raise DimensionMismatch("gradient buffer does not match parameter shapes")
    if len(state.m) != len(params.arrays()) or any(
        m.shape != a.shape for m, a in zip(state.m, params.arrays())
    ):
        raise DimensionMismatch("optimizer state does not match parameter shapes")

    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    step_size = lr / (1.0 - b1**t)
    inv_bc2 = 1.0 / (1.0 - b2**t)
    decay = 1.0 - lr * weight_decay

    new_arrays, new_m, new_v = [], [], []
    for p, g, m, v in zip(params.arrays(), grads.arrays(), state.m, state.v):
        dt = m.dtype
        g = np.asarray(g, dtype=dt)
        m = m * dt.type(b1)
        m += dt.type(1.0 - b1) * g
        v = v * dt.type(b2)
        v += dt.type(1.0 - b2) * (g * g)
        denom = np.sqrt(v * dt.type(inv_bc2))
        denom += dt.type(state.eps)
        update = m / denom
        update *= dt.type(step_size)
        out = p.astype(dt) * dt.type(decay)
        out -= update
        new_arrays.append(out.astype(p.dtype, copy=False))
        new_m.append(m)
        new_v.append(v)

    new_state = AdamWState(new_m, new_v, t, b1, b2, state.eps)
    return params.with_arrays(new_arrays), new_state


@dataclass(frozen=True)
class OneCycleSchedule:
    max_lr: float
    total_steps: int
    pct_start: float = 0.3
    div_factor: float = 25.0
    final_div_factor: float = 1e4

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError("total_steps must be positive")
        if not 0.0 < self.pct_start < 1.0:
            raise ValueError("pct_start must lie in (0, 1)")
        if self.div_factor <= 1 or self.final_div_factor <= 1:
            raise ValueError("div factors must exceed 1")

    @property
    def initial_lr(self):
        return self.max_lr / self.div_factor

    @property
    def final_lr(self):
        return self.max_lr / self.final_div_factor

    @property
    def peak_step(self):
        # Pinned inside the run so both phases have at least one step when possible.
        peak = round(self.pct_start * self.total_steps)
        return min(max(peak, 1), max(self.total_steps - 2, 1))


def _cos_anneal(start, end, frac):
    return end + (start - end) * 0.5 * (1.0 + math.cos(math.pi * frac))


def one_cycle_lr(schedule, step):
    """Learning rate at optimizer step ``step`` (0-based).

    Cosine warmup from ``max_lr / div_factor`` to ``max_lr`` at ``peak_step``,
    then cosine decay to ``max_lr / final_div_factor`` at ``total_steps - 1``.
    Runs shorter than three steps cannot hit all three anchors; there the
    earlier anchor wins.
    """
    total = schedule.total_steps
    if step < 0 or step >= total:
        raise OutOfRange(f"step {step} outside [0, {total})")
    peak = schedule.peak_step
    if step <= peak:
        if peak == 0:
            return schedule.initial_lr
        return _cos_anneal(schedule.initial_lr, schedule.max_lr, step / peak)
    span = total - 1 - peak
    return _cos_anneal(schedule.max_lr, schedule.final_lr, (step - peak) / span)
