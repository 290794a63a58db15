"""Adam optimizer with decoupled weight decay and frozen-parameter masking."""

from __future__ import annotations

from typing import Iterable

import numpy as np

from .errors import ConfigError
from .tensor import Parameter


class Adam:
    """Adam with decoupled (AdamW-style) weight decay.

    Frozen parameters are skipped entirely: no data update, no moment update,
    no step-count advance. Moment buffers are keyed by parameter name so a
    parameter can be frozen and later unfrozen without losing its state.
    """

    def __init__(self, params: Iterable[Parameter], learning_rate: float,
                 weight_decay: float = 0.0, betas: tuple = (0.9, 0.999),
                 eps: float = 1e-8):
        if learning_rate <= 0:
            raise ConfigError(f"learning rate must be positive, got {learning_rate}")
        if weight_decay < 0:
            raise ConfigError(f"weight decay must be non-negative, got {weight_decay}")
        self.params = list(params)
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate parameter names passed to optimizer")
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self._state: dict[str, dict] = {}

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        for p in self.params:
            if p.frozen or p.grad is None:
                continue
            st = self._state.get(p.name)
            if st is None:
                st = {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data), "t": 0}
                self._state[p.name] = st
            st["t"] += 1
            g = p.grad
            st["m"] = self.beta1 * st["m"] + (1 - self.beta1) * g
            st["v"] = self.beta2 * st["v"] + (1 - self.beta2) * (g * g)
            m_hat = st["m"] / (1 - self.beta1 ** st["t"])
            v_hat = st["v"] / (1 - self.beta2 ** st["t"])
            update = m_hat / (np.sqrt(v_hat) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data = p.data - self.learning_rate * update
