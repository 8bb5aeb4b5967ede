"""Feedforward Q-value approximator with experience replay and a frozen target.

Two hidden rectifier layers trained by Adam on squared TD error.  Pure numpy;
the network is small enough that dense matmuls dominate anyway.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

__all__ = ["QNet", "ReplayBuffer", "td_step"]

log = logging.getLogger("sir.qnet")


def _he_init(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), (fan_in, fan_out))


@dataclass
class QNet:
    n_inputs: int
    n_actions: int
    hidden: int = 64
    lr: float = 1e-3
    params: list = field(default_factory=list)
    _adam_m: list = field(default_factory=list)
    _adam_v: list = field(default_factory=list)
    _adam_t: int = 0

    def init(self, rng: np.random.Generator) -> "QNet":
        h = self.hidden
        self.params = [
            _he_init(rng, self.n_inputs, h), np.zeros(h),
            _he_init(rng, h, h), np.zeros(h),
            _he_init(rng, h, self.n_actions), np.zeros(self.n_actions),
        ]
        self._adam_m = [np.zeros_like(p) for p in self.params]
        self._adam_v = [np.zeros_like(p) for p in self.params]
        self._adam_t = 0
        return self

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        w1, b1, w2, b2, w3, b3 = self.params
        h1 = np.maximum(x @ w1 + b1, 0.0)
        h2 = np.maximum(h1 @ w2 + b2, 0.0)
        return h2 @ w3 + b3

    def copy_params(self) -> list:
        return [p.copy() for p in self.params]

    def _forward_cached(self, x):
        w1, b1, w2, b2, w3, b3 = self.params
        a1 = x @ w1 + b1
        h1 = np.maximum(a1, 0.0)
        a2 = h1 @ w2 + b2
        h2 = np.maximum(a2, 0.0)
        return (x, a1, h1, a2, h2), h2 @ w3 + b3

    def grad_step(self, x: np.ndarray, actions: np.ndarray, targets: np.ndarray) -> float:
        """One Adam step on mean squared TD error of the chosen actions.

        Returns the pre-step batch loss.
        """
        x = np.atleast_2d(x)
        n = x.shape[0]
        cache, q = self._forward_cached(x)
        xin, a1, h1, a2, h2 = cache
        idx = (np.arange(n), actions)
        err = q[idx] - targets
        loss = float(np.mean(err ** 2))
        gq = np.zeros_like(q)
        gq[idx] = 2.0 * err / n
        w1, b1, w2, b2, w3, b3 = self.params
        gw3 = h2.T @ gq
        gb3 = gq.sum(axis=0)
        gh2 = gq @ w3.T
        gh2[a2 <= 0] = 0.0
        gw2 = h1.T @ gh2
        gb2 = gh2.sum(axis=0)
        gh1 = gh2 @ w2.T
        gh1[a1 <= 0] = 0.0
        gw1 = xin.T @ gh1
        gb1 = gh1.sum(axis=0)
        grads = [gw1, gb1, gw2, gb2, gw3, gb3]
        self._adam_t += 1
        b1m, b2m, eps = 0.9, 0.999, 1e-8
        t = self._adam_t
        for i, g in enumerate(grads):
            self._adam_m[i] = b1m * self._adam_m[i] + (1 - b1m) * g
            self._adam_v[i] = b2m * self._adam_v[i] + (1 - b2m) * g * g
            mh = self._adam_m[i] / (1 - b1m ** t)
            vh = self._adam_v[i] / (1 - b2m ** t)
            self.params[i] = self.params[i] - self.lr * mh / (np.sqrt(vh) + eps)
        return loss


class ReplayBuffer:
    """Uniform-sampling ring buffer of (state, action, reward, next_state)."""

    def __init__(self, capacity: int, state_dim: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.states = np.zeros((capacity, state_dim))
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity)
        self.next_states = np.zeros((capacity, state_dim))
        self.n = 0
        self._head = 0

    def push(self, s, a, r, s2) -> None:
        i = self._head
        self.states[i] = s
        self.actions[i] = a
        self.rewards[i] = r
        self.next_states[i] = s2
        self._head = (i + 1) % self.capacity
        self.n = min(self.n + 1, self.capacity)

    def sample(self, batch: int, rng: np.random.Generator):
        idx = rng.integers(0, self.n, size=batch)
        return (self.states[idx], self.actions[idx], self.rewards[idx],
                self.next_states[idx])


def td_step(net: QNet, target_params: list, batch, discount: float) -> float:
    """One TD step: targets from the frozen parameter set, update on ``net``."""
    s, a, r, s2 = batch
    live = net.params
    net.params = target_params
    qn = net.forward(s2)
    net.params = live
    targets = r + discount * qn.max(axis=1)
    return net.grad_step(s, a, targets)
