"""First-order optimizer, learning-rate schedule, and the finite-difference
gradient checker used across modules."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    """Bias-corrected Adam moments for one flat parameter vector."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @staticmethod
    def for_params(params):
        params = np.asarray(params, dtype=float)
        return AdamState(np.zeros_like(params), np.zeros_like(params))


def adam_step(state: AdamState, params, grads, lr):
    """One Adam update; returns the new parameter vector."""
    params = np.asarray(params, dtype=float)
    grads = np.asarray(grads, dtype=float)
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ValueError("parameter/gradient length mismatch")
    state.step += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1 - state.beta2) * grads * grads
    mhat = state.m / (1 - state.beta1 ** state.step)
    vhat = state.v / (1 - state.beta2 ** state.step)
    return params - lr * mhat / (np.sqrt(vhat) + state.eps)


@dataclass(frozen=True)
class LrSchedule:
    """Step decay: lr(epoch) = initial_lr * decay_factor ** (epoch // decay_every)."""

    initial_lr: float = 0.1
    decay_factor: float = 0.5
    decay_every: int = 50
    max_epochs: int = 300

    def __post_init__(self):
        if self.initial_lr <= 0:
            raise ValueError("initial_lr must be positive")
        if not (0 < self.decay_factor <= 1):
            raise ValueError("decay_factor must lie in (0, 1]")
        if self.decay_every <= 0 or self.max_epochs <= 0:
            raise ValueError("epoch counts must be positive")

    def lr_at(self, epoch):
        return self.initial_lr * self.decay_factor ** (epoch // self.decay_every)


def clip_global_norm(grads, max_norm=10.0):
    """Scale a dict or list of gradient arrays so their joint norm <= max_norm."""
    arrays = list(grads.values()) if isinstance(grads, dict) else list(grads)
    total = math.sqrt(sum(float(np.sum(g * g)) for g in arrays))
    if total <= max_norm or total == 0.0:
        return grads, total
    scale = max_norm / total
    if isinstance(grads, dict):
        return {k: g * scale for k, g in grads.items()}, total
    return [g * scale for g in arrays], total


def fd_check(f, params, analytic, h=1e-5):
    """Max relative error between analytic gradients and central differences.

    rel err per coordinate = |g_fd - g| / max(1e-8, |g_fd| + |g|).
    """
    params = np.asarray(params, dtype=float)
    analytic = np.asarray(analytic, dtype=float)
    if params.shape != analytic.shape:
        raise ValueError("parameter/gradient length mismatch")
    worst = 0.0
    x = params.copy()
    for i in range(x.size):
        orig = x.flat[i]
        x.flat[i] = orig + h
        fp = f(x)
        x.flat[i] = orig - h
        fm = f(x)
        x.flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError("non-finite objective during fd_check")
        g_fd = (fp - fm) / (2 * h)
        g = analytic.flat[i]
        rel = abs(g_fd - g) / max(1e-8, abs(g_fd) + abs(g))
        worst = max(worst, rel)
    return worst
