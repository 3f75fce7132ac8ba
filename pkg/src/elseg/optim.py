"""Adam with Nesterov momentum (Nadam)."""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np


@dataclass
class NadamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    schedule_decay: float = 0.96
    schedule_period: float = 250.0
    clip_norm: float | None = None


class Nadam:
    """Nadam with the momentum schedule ``mu_t = beta1 (1 - 0.5 * 0.96 ** (t / 250))``.

    For step ``t`` with ``prod_t = mu_1 ... mu_t``::

        m_t = beta1 m + (1 - beta1) g
        v_t = beta2 v + (1 - beta2) g^2
        m_hat = mu_{t+1} m_t / (1 - prod_t mu_{t+1}) + (1 - mu_t) g / (1 - prod_t)
        v_hat = v_t / (1 - beta2^t)
        w -= lr m_hat / (sqrt(v_hat) + eps)

    Parameters are updated in the iteration order of the mapping passed to
    :meth:`step`, which the callers keep fixed.
    """

    def __init__(self, config: NadamConfig | None = None):
        self.config = config or NadamConfig()
        self.step_count = 0
        self.mu_product = 1.0
        self.m: "OrderedDict[str, np.ndarray]" = OrderedDict()
        self.v: "OrderedDict[str, np.ndarray]" = OrderedDict()

    def mu(self, t: int) -> float:
        c = self.config
        return c.beta1 * (1.0 - 0.5 * c.schedule_decay ** (t / c.schedule_period))

    def step(self, params: dict, grads: dict) -> None:
        """Update ``params`` (name -> array or Tensor) in place."""
        c = self.config
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        if c.clip_norm is not None:
            total = np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
            factor = min(1.0, c.clip_norm / (total + 1e-12))
        else:
            factor = 1.0

        t = self.step_count + 1
        mu_t, mu_next = self.mu(t), self.mu(t + 1)
        prod_t = self.mu_product * mu_t
        prod_next = prod_t * mu_next
        bias2 = 1.0 - c.beta2 ** t

        for name, p in params.items():
            data = p if isinstance(p, np.ndarray) else p.data
            g = np.asarray(grads[name], dtype=np.float64) * factor
            if g.shape != data.shape:
                raise ValueError(f"gradient for {name!r} has shape {g.shape}, parameter has {data.shape}")
            m = self.m.get(name)
            v = self.v.get(name)
            if m is None:
                m = np.zeros(data.shape, np.float64)
                v = np.zeros(data.shape, np.float64)
            m = c.beta1 * m + (1.0 - c.beta1) * g
            v = c.beta2 * v + (1.0 - c.beta2) * g * g
            m_hat = mu_next * m / (1.0 - prod_next) + (1.0 - mu_t) * g / (1.0 - prod_t)
            v_hat = v / bias2
            update = c.lr * m_hat / (np.sqrt(v_hat) + c.eps)
            data -= update.astype(data.dtype)
            self.m[name], self.v[name] = m, v

        self.step_count = t
        self.mu_product = prod_t

    def state_arrays(self) -> "OrderedDict[str, np.ndarray]":
        """Moments and scalars as named float arrays (checkpoint blocks)."""
        out = OrderedDict()
        out["optim.step"] = np.array([self.step_count], np.float32)
        out["optim.mu_product"] = np.array([self.mu_product], np.float32)
        for k in self.m:
            out[f"optim.m.{k}"] = self.m[k]
            out[f"optim.v.{k}"] = self.v[k]
        return out

    def load_state_arrays(self, arrays: dict) -> None:
        if not arrays:
            return
        self.step_count = int(arrays["optim.step"][0])
        self.mu_product = float(arrays["optim.mu_product"][0])
        self.m, self.v = OrderedDict(), OrderedDict()
        for k, a in arrays.items():
            if k.startswith("optim.m."):
                self.m[k[len("optim.m."):]] = np.asarray(a, np.float64)
            elif k.startswith("optim.v."):
                self.v[k[len("optim.v."):]] = np.asarray(a, np.float64)
