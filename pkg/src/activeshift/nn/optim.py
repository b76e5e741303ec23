"""SGD with momentum, learning-rate schedules and normalized shift updates."""

from __future__ import annotations

import bisect

import numpy as np

NORM_EPS = 1e-12


class StepSchedule:
    """``base * gamma ** (number of milestones <= iteration)``."""

    def __init__(self, base=0.1, milestones=(32000, 48000), gamma=0.1):
        self.base = base
        self.milestones = sorted(milestones)
        self.gamma = gamma

    def __call__(self, iteration):
        return self.base * self.gamma ** bisect.bisect_right(self.milestones, iteration)


class LinearSchedule:
    """Linear decay from ``base`` at iteration 0 to zero at ``total``."""

    def __init__(self, base=0.1, total=1):
        self.base = base
        self.total = max(1, total)

    def __call__(self, iteration):
        return self.base * max(0.0, 1.0 - iteration / self.total)


def normalized_shift_update(params, lr_shift, mode="layer"):
    """Move shift parameters along their unit-normalized negative gradient.

    ``mode="layer"`` normalizes each layer's whole (C, 2) gradient, so every
    layer moves by exactly ``lr_shift`` in L2; ``mode="pair"`` normalizes each
    channel's (alpha, beta) pair separately.
    """
    for p in params:
        if not p.trainable or p.grad is None:
            continue
        g = np.asarray(p.grad, dtype=np.float64)
        if mode == "layer":
            g = g / (np.sqrt(np.sum(g * g)) + NORM_EPS)
        elif mode == "pair":
            g = g / (np.sqrt(np.sum(g * g, axis=1, keepdims=True)) + NORM_EPS)
        else:
            raise ValueError(f"unknown normalization mode {mode!r}")
        p.data -= lr_shift * g


class SGD:
    """Momentum SGD: ``v = m*v + g + wd*p``, ``p -= lr*v``.

    Weight decay only touches parameters with ``decay`` set (conv and fc
    weights).  Shift parameters skip momentum and decay and instead take a
    normalized step with learning rate ``shift_lr * lr(t) / lr(0)``.
    """

    def __init__(self, named_params, schedule, momentum=0.9, weight_decay=0.0,
                 shift_lr=1e-2, shift_norm="layer"):
        self.named_params = list(named_params)
        self.schedule = schedule
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.shift_lr = shift_lr
        self.shift_norm = shift_norm
        self.velocity = {
            name: np.zeros_like(p.data)
            for name, p in self.named_params
            if p.kind != "shift" and p.trainable
        }

    def lr(self, iteration):
        return self.schedule(iteration)

    def shift_lr_at(self, iteration):
        base = self.schedule(0)
        return self.shift_lr * (self.schedule(iteration) / base if base else 0.0)

    def step(self, iteration):
        lr = self.lr(iteration)
        shifts = []
        for name, p in self.named_params:
            if not p.trainable or p.grad is None:
                continue
            if p.kind == "shift":
                shifts.append(p)
                continue
            v = self.velocity[name]
            v *= self.momentum
            v += p.grad
            if p.decay and self.weight_decay:
                v += self.weight_decay * p.data
            if lr:
                p.data -= p.data.dtype.type(lr) * v
        lr_shift = self.shift_lr_at(iteration)
        if lr_shift:
            normalized_shift_update(shifts, lr_shift, self.shift_norm)
