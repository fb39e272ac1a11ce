"""Adam optimizer over autodiff tensors.

Kept deliberately small: parameters are updated in place from a matching
list of gradient tensors, so training loops stay functional (no .grad
accumulation to reset).
"""

import numpy as np


class Adam:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads):
        """Apply one update; `grads` aligns with the params list."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            gd = g.data if hasattr(g, "data") else g
            m *= b1
            m += (1.0 - b1) * gd
            v *= b2
            v += (1.0 - b2) * gd * gd
            p.data = p.data - self.lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)
