"""SGD with momentum and L2 weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class OptimizerState:
    learning_rate: float = 5e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    velocity: list = field(default_factory=list)


def sgd_step(params, grads, state: OptimizerState):
    """One in-place update: ``v <- mu*v + (g + wd*p)``; ``p <- p - lr*v``.

    Velocity buffers are created lazily on the first call.
    """
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} params but {len(grads)} grads")
    if not state.velocity:
        state.velocity = [np.zeros_like(p) for p in params]
    for p, g, v in zip(params, grads, state.velocity):
        if p.shape != g.shape or p.shape != v.shape:
            raise ValueError(f"shape mismatch: param {p.shape}, grad {g.shape}, velocity {v.shape}")
        v *= state.momentum
        v += g
        if state.weight_decay:
            v += state.weight_decay * p
        if state.learning_rate:
            p -= state.learning_rate * v
    return params


class SGD:
    """Optimizer bound to a list of :class:`~depthscope.engine.layers.Parameter`.

    Frozen parameters (``requires_grad = False``) are skipped entirely and
    keep their velocity untouched.
    """

    def __init__(self, parameters, learning_rate=5e-3, momentum=0.9, weight_decay=5e-4):
        self.parameters = list(parameters)
        self.state = OptimizerState(learning_rate, momentum, weight_decay,
                                    [np.zeros_like(p.data) for p in self.parameters])

    def step(self):
        active = [i for i, p in enumerate(self.parameters) if p.requires_grad]
        sub = OptimizerState(self.state.learning_rate, self.state.momentum,
                             self.state.weight_decay, [self.state.velocity[i] for i in active])
        sgd_step([self.parameters[i].data for i in active],
                 [self.parameters[i].grad for i in active], sub)

    def zero_grad(self):
        for p in self.parameters:
            p.zero_grad()
