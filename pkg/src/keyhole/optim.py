import numpy as np


class Adam:
    """Adaptive-moment optimizer for a single array parameter.

    ``maximize=True`` ascends the objective (the reconstruction objectives
    are log-likelihoods).
    """

    def __init__(self, lr=0.1, betas=(0.5, 0.999), eps=1e-8, maximize=True):
        if not lr > 0:
            raise ValueError("learning rate must be > 0")
        b1, b2 = betas
        if not (0 <= b1 < 1 and 0 <= b2 < 1):
            raise ValueError("momentum decays must lie in [0, 1)")
        self.lr = lr
        self.beta1, self.beta2 = b1, b2
        self.eps = eps
        self.maximize = maximize
        self.reset()

    def reset(self):
        self.m = None
        self.v = None
        self.t = 0

    def step(self, param, grad):
        """Return the updated parameter (``param`` is not modified)."""
        if self.m is None:
            self.m = np.zeros_like(param)
            self.v = np.zeros_like(param)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        update = self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return param + update if self.maximize else param - update
