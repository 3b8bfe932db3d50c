"""SGD with momentum and L2 weight decay, plus the step learning-rate schedule."""

import numpy as np


def sgd_step(params, grads, velocity, lr, momentum=0.9, weight_decay=1e-4):
    """Update ``params`` in place.

    v <- momentum * v + grad + weight_decay * param
    param <- param - lr * v

    ``params``, ``grads`` and ``velocity`` are dicts keyed by name; missing
    velocity entries start at zero. Parameters without a gradient are skipped.
    """
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        v = velocity.get(name)
        if v is None:
            v = velocity[name] = np.zeros_like(p)
        v *= momentum
        v += g
        if weight_decay:
            v += weight_decay * p
        p -= lr * v
    return params


def step_lr(base_lr, epoch, step, factor):
    """Learning rate at (0-based) ``epoch``: base_lr * factor ** (epoch // step)."""
    return base_lr * factor ** (epoch // step)


class SGD:
    def __init__(self, params, lr, momentum=0.9, weight_decay=1e-4):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {}

    def step(self, grads):
        sgd_step(self.params, grads, self.velocity, self.lr, self.momentum, self.weight_decay)
