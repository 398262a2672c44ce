"""AdamW with decoupled weight decay and a warmup + cosine schedule.

The decay set follows the usual transformer convention: parameters of
rank <= 1 (biases, norm gains, learnable tokens) and position embeddings
are excluded; everything else decays.  One update for parameter p with
gradient g:

    m <- b1*m + (1-b1)*g          mhat = m / (1 - b1^t)
    v <- b2*v + (1-b2)*g*g        vhat = v / (1 - b2^t)
    p <- p - lr * (mhat / (sqrt(vhat) + eps) + wd*p)

with wd read from the pre-update p (decay is decoupled from the moment
estimates).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .tensor import Tensor


@dataclass
class Schedule:
    """Linear warmup to base_lr, then cosine decay to min_lr."""

    base_lr: float = 1e-3
    min_lr: float = 1e-5
    warmup_epochs: float = 5.0
    total_epochs: float = 300.0

    def validate(self) -> "Schedule":
        if self.base_lr <= 0 or self.min_lr < 0:
            raise ConfigError(f"bad learning rates base={self.base_lr} min={self.min_lr}")
        if self.min_lr > self.base_lr:
            raise ConfigError(f"min_lr {self.min_lr} exceeds base_lr {self.base_lr}")
        if self.warmup_epochs < 0 or self.total_epochs <= 0:
            raise ConfigError(
                f"bad schedule span warmup={self.warmup_epochs} total={self.total_epochs}")
        if self.warmup_epochs > self.total_epochs:
            raise ConfigError(
                f"warmup {self.warmup_epochs} exceeds total {self.total_epochs}")
        return self

    def lr_at(self, epoch: float) -> float:
        """Learning rate at a (fractional) epoch position.

        The warmup end returns base_lr exactly and any epoch >= total
        returns min_lr exactly; the cosine is only evaluated strictly
        inside the decay span.
        """
        if epoch < 0:
            raise ConfigError(f"epoch must be >= 0, got {epoch}")
        if epoch < self.warmup_epochs:
            return self.base_lr * (epoch / self.warmup_epochs)
        if epoch >= self.total_epochs:
            return self.min_lr
        if epoch == self.warmup_epochs:
            return self.base_lr
        frac = (epoch - self.warmup_epochs) / (self.total_epochs - self.warmup_epochs)
        return self.min_lr + (self.base_lr - self.min_lr) * 0.5 * (1.0 + math.cos(math.pi * frac))


def lr_at(schedule: Schedule, epoch: float) -> float:
    return schedule.lr_at(epoch)


def excluded_from_decay(name: str, p: Tensor) -> bool:
    """Biases, norm affines, tokens (all rank <= 1) and position embeddings."""
    return p.data.ndim <= 1 or name.split(".")[-1] in ("pos_embed", "tokens")


@dataclass
class OptimState:
    """First/second moment estimates keyed by parameter name."""

    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(state: OptimState, named_params, lr: float,
               beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
               weight_decay: float = 0.05):
    """Apply one AdamW update in place; params without a grad are skipped."""
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in named_params:
        g = p.grad
        if g is None:
            continue
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        if weight_decay != 0.0 and not excluded_from_decay(name, p):
            update = update + weight_decay * p.data
        p.data = p.data - lr * update


class AdamW:
    """Stateful wrapper around adamw_step for a fixed parameter list."""

    def __init__(self, named_params, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.05):
        if not 0.0 <= beta1 < 1.0 or not 0.0 <= beta2 < 1.0:
            raise ConfigError(f"betas must lie in [0, 1), got {beta1}, {beta2}")
        if eps <= 0:
            raise ConfigError(f"eps must be positive, got {eps}")
        if weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {weight_decay}")
        self.named_params = list(named_params)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = OptimState()

    def step(self, lr: float):
        adamw_step(self.state, self.named_params, lr, beta1=self.beta1,
                   beta2=self.beta2, eps=self.eps, weight_decay=self.weight_decay)

    def zero_grad(self):
        for _, p in self.named_params:
            p.grad = None
