"""Adam with coupled L2 weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import MutableMapping

import numpy as np

from ..errors import NonFiniteGradient


@dataclass
class TrainConfig:
    learning_rate: float = 2e-6
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 64
    max_steps: int = 2000
    eval_every: int = 50
    patience: int = 10
    mirror_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not (self.learning_rate > 0 and self.weight_decay >= 0 and self.epsilon > 0):
            raise ValueError("learning_rate and epsilon must be positive, weight_decay non-negative")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("adam betas must lie in (0, 1)")
        if min(self.batch_size, self.max_steps, self.eval_every, self.patience) < 1:
            raise ValueError("batch_size, max_steps, eval_every and patience must be >= 1")
        if not 0 <= self.mirror_prob <= 1:
            raise ValueError("mirror_prob must lie in [0, 1]")


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: MutableMapping[str, np.ndarray], grads, state: AdamState, cfg: TrainConfig):
    """One in-place Adam update; the decay term ``weight_decay * theta`` is added to each gradient."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NonFiniteGradient(f"non-finite gradient for {name} at step {state.t + 1}")
    state.t += 1
    t = state.t
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    for name, g in grads.items():
        theta = params[name]
        g = g + cfg.weight_decay * theta if cfg.weight_decay else g
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        v = state.v[name]
        m *= cfg.beta1
        m += (1 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1 - cfg.beta2) * (g * g)
        step = cfg.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + cfg.epsilon)
        theta -= step.astype(theta.dtype, copy=False)
    return params, state
