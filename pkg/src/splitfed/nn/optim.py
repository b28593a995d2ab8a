from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class OptimizerState:
    """Constant-rate SGD with heavy-ball momentum: ``v = mu*v + g; w -= lr*v``."""

    lr: float = 0.01
    momentum: float = 0.9
    velocity: list | None = field(default=None, repr=False)

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")


def sgd_step(params, grads, opt: OptimizerState):
    """Update ``params`` in place and return them."""
    if len(params) != len(grads):
        raise ValueError("parameter and gradient stores have different layer counts")
    if opt.velocity is None:
        opt.velocity = [{k: np.zeros_like(v) for k, v in p.items()} for p in params]
    for p, g, vel in zip(params, grads, opt.velocity):
        if p.keys() != g.keys():
            raise ValueError(f"gradient names {sorted(g)} do not match parameters {sorted(p)}")
        for name, w in p.items():
            if g[name].shape != w.shape or vel[name].shape != w.shape:
                raise ValueError(f"shape mismatch for {name}: {w.shape} vs {g[name].shape}")
            v = vel[name]
            v *= opt.momentum
            v += g[name]
            w -= opt.lr * v
    return params
