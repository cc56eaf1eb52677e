import numpy as np


class SGD:
    """Stochastic gradient descent with optional momentum and step decay.

    Parameters are updated in place. ``lr`` may be a dict keyed by
    parameter name for per-block learning rates. Every ``step_size`` calls
    to :meth:`end_epoch` the rates are multiplied by ``gamma``.
    """

    def __init__(self, lr, momentum=0.0, step_size=0, gamma=0.1):
        self.lr = lr
        self.momentum = momentum
        self.step_size = step_size
        self.gamma = gamma
        self.scale = 1.0
        self.epoch = 0
        self._velocity = {}

    def rate(self, name):
        base = self.lr[name] if isinstance(self.lr, dict) else self.lr
        return base * self.scale

    def step(self, params, grads):
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            if self.momentum:
                v = self._velocity.setdefault(name, np.zeros_like(p))
                v *= self.momentum
                v += g
                g = v
            p -= self.rate(name) * g

    def end_epoch(self):
        self.epoch += 1
        if self.step_size and self.epoch % self.step_size == 0:
            self.scale *= self.gamma
