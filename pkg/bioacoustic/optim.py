import numpy as np


class Adam:
    """Adam over a ModelParams tree; only names present in ``grads`` move."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params, grads):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, grad in grads.items():
            p = params[name]
            m = self.m.get(name, np.zeros_like(p))
            v = self.v.get(name, np.zeros_like(p))
            m = self.beta1 * m + (1 - self.beta1) * grad
            v = self.beta2 * v + (1 - self.beta2) * grad * grad
            self.m[name], self.v[name] = m, v
            if self.lr == 0:
                continue
            update = self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            params[name] = (p - update).astype(p.dtype)
        return params
