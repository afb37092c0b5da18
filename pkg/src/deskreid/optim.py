"""Optimizers and learning-rate scheduling.

Both optimizers take gradients already accumulated on parameter tensors and
apply in-place updates.  Weight decay is folded into the gradient (classic
L2 regularization) before any momentum bookkeeping, so it participates in
the moment estimates rather than being applied as a separate decoupled step.
"""

import numpy as np


class Adam:
    """Adaptive moment estimation with bias-corrected first/second moments.

    Per step, for each parameter with gradient g (plus weight_decay * theta
    when weight decay is enabled):

        m <- beta1 * m + (1 - beta1) * g
        v <- beta2 * v + (1 - beta2) * g^2
        m_hat = m / (1 - beta1^t),  v_hat = v / (1 - beta2^t)
        theta <- theta - lr * m_hat / (sqrt(v_hat) + eps)
    """

    def __init__(self, params, lr=0.00035, beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=0.0):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay != 0.0:
                g = g + self.weight_decay * p.data
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g
            m_hat = self.m[i] / bc1
            v_hat = self.v[i] / bc2
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def state_arrays(self):
        """Optimizer state as named arrays, for checkpointing."""
        out = [("t", np.asarray(float(self.t)))]
        for i in range(len(self.params)):
            out.append((f"m{i}", self.m[i]))
            out.append((f"v{i}", self.v[i]))
        return out

    def load_state_arrays(self, arrays):
        self.t = int(round(float(arrays["t"])))
        for i in range(len(self.params)):
            m, v = arrays[f"m{i}"], arrays[f"v{i}"]
            if m.shape != self.m[i].shape or v.shape != self.v[i].shape:
                raise ValueError(f"optimizer state shape mismatch at slot {i}")
            self.m[i] = m.copy()
            self.v[i] = v.copy()


class SGD:
    """Stochastic gradient descent with classical momentum.

        velocity <- momentum * velocity + g
        theta <- theta - lr * velocity
    """

    def __init__(self, params, lr=0.01, momentum=0.9, weight_decay=0.0):
        self.params = list(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.t = 0
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay != 0.0:
                g = g + self.weight_decay * p.data
            self.velocity[i] = self.momentum * self.velocity[i] + g
            p.data -= self.lr * self.velocity[i]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def state_arrays(self):
        out = [("t", np.asarray(float(self.t)))]
        for i in range(len(self.params)):
            out.append((f"vel{i}", self.velocity[i]))
        return out

    def load_state_arrays(self, arrays):
        self.t = int(round(float(arrays["t"])))
        for i in range(len(self.params)):
            vel = arrays[f"vel{i}"]
            if vel.shape != self.velocity[i].shape:
                raise ValueError(f"optimizer state shape mismatch at slot {i}")
            self.velocity[i] = vel.copy()


def step_lr(initial_lr, epoch, decay_factor=0.1, decay_every=20):
    """Piecewise-constant schedule: lr = initial * factor^floor(epoch/every)."""
    if decay_every <= 0:
        raise ValueError("decay_every must be positive")
    return initial_lr * decay_factor ** (epoch // decay_every)


def make_optimizer(kind, params, lr, weight_decay):
    """Build an optimizer by name; 'adam' and 'sgd' are understood."""
    if kind == "adam":
        return Adam(params, lr=lr, weight_decay=weight_decay)
    if kind == "sgd":
        return SGD(params, lr=lr, momentum=0.9, weight_decay=weight_decay)
    raise ValueError(f"unknown optimizer {kind!r}")
