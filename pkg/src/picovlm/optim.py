"""Decoupled-weight-decay Adam, cosine schedule with warmup, gradient clipping.

The decay term never enters the moment estimates: the update is

    w <- w - lr_t * m_hat / (sqrt(v_hat) + eps) - lr_t * wd * w

with lr_t the scheduled rate, so a step at lr 0 changes nothing at all.
Moment buffers exist only for the parameters handed to the optimizer;
frozen parameters are simply not handed over.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


@dataclass
class StageSchedule:
    stage: int
    trainable: tuple
    peak_lr: float
    min_lr: float
    warmup_iters: int
    total_iters: int
    clip_norm: float = 1.0
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.0
    batch_size: int = 8

    def __post_init__(self):
        self.trainable = tuple(self.trainable)
        if self.warmup_iters > self.total_iters:
            raise ConfigError(
                f"warmup {self.warmup_iters} exceeds total {self.total_iters}")
        if self.min_lr > self.peak_lr:
            raise ConfigError(f"min_lr {self.min_lr} above peak_lr {self.peak_lr}")
        if self.total_iters < 1:
            raise ConfigError("total_iters must be positive")
        if self.clip_norm <= 0:
            raise ConfigError("clip_norm must be positive")


def lr_at(it, sched):
    """Linear 0 -> peak over warmup, then cosine peak -> min over the rest."""
    if not 0 <= it <= sched.total_iters:
        raise ConfigError(
            f"iteration {it} outside schedule range [0, {sched.total_iters}]")
    if it < sched.warmup_iters:
        return sched.peak_lr * it / sched.warmup_iters
    span = sched.total_iters - sched.warmup_iters
    if span == 0:
        return sched.peak_lr
    progress = (it - sched.warmup_iters) / span
    return sched.min_lr + (sched.peak_lr - sched.min_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))


def global_grad_norm(params):
    """L2 norm over all gradients, accumulated in float64."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            g = p.grad.astype(np.float64, copy=False)
            total += float(np.dot(g.reshape(-1), g.reshape(-1)))
    return math.sqrt(total)


def clip_gradients(params, clip_norm):
    """Scale all gradients so the global norm is at most clip_norm.

    Returns the pre-clip norm.
    """
    norm = global_grad_norm(params)
    if norm > clip_norm:
        factor = clip_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= p.grad.dtype.type(factor)
    return norm


class AdamW:
    def __init__(self, params, betas=(0.9, 0.999), eps=1e-8):
        self.params = dict(params)
        self.betas = betas
        self.eps = eps
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.step_count = 0

    def zero_grads(self):
        for p in self.params.values():
            p.grad = None

    def step(self, lr, weight_decay=0.0):
        """One update over every parameter that has a gradient."""
        self.step_count += 1
        b1, b2 = self.betas
        t = self.step_count
        bc1 = 1.0 - b1 ** t
        bc2 = 1.0 - b2 ** t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            m_hat = m / bc1
            v_hat = v / bc2
            update = lr * m_hat / (np.sqrt(v_hat) + self.eps)
            if weight_decay:
                update = update + (lr * weight_decay) * p.data
            p.data = p.data - update.astype(p.data.dtype)

    def state_arrays(self):
        """Moment buffers plus the step counter, for checkpointing."""
        out = {"__step__": np.array([float(self.step_count)], dtype=np.float64)}
        for k in self.params:
            out[f"m.{k}"] = self.m[k]
            out[f"v.{k}"] = self.v[k]
        return out

    def load_state_arrays(self, arrays):
        self.step_count = int(arrays["__step__"][0])
        for k in self.params:
            self.m[k] = arrays[f"m.{k}"].astype(self.m[k].dtype)
            self.v[k] = arrays[f"v.{k}"].astype(self.v[k].dtype)
