"""Optimizers over an explicit list of trainable tensors."""

from __future__ import annotations

import math

import numpy as np

from .autograd import NumericError, Tensor


class SGDMomentum:
    def __init__(self, params: list[Tensor], lr: float, momentum: float = 0.9,
                 weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    @np.errstate(over="ignore", invalid="ignore")
    def step(self) -> None:
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            v *= self.momentum
            v += g
            p.data -= self.lr * v
            _check(p)


class AdamW:
    def __init__(self, params: list[Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    # overflow surfaces as NumericError from _check
    @np.errstate(over="ignore", invalid="ignore")
    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            _check(p)


def _check(p: Tensor) -> None:
    if not np.isfinite(p.data).all():
        raise NumericError("optimizer step produced a non-finite parameter")


def make_optimizer(plan, params: list[Tensor]):
    if plan.optimizer == "adamw":
        return AdamW(params, plan.lr, betas=plan.betas, weight_decay=plan.weight_decay)
    return SGDMomentum(params, plan.lr, momentum=plan.momentum, weight_decay=plan.weight_decay)


def lr_at(plan, epoch: int) -> float:
    """Learning rate for 0-based ``epoch``."""
    if plan.schedule == "constant" or plan.epochs <= 1:
        return plan.lr
    return 0.5 * plan.lr * (1.0 + math.cos(math.pi * epoch / plan.epochs))
