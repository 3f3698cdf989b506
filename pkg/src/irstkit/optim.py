"""Adam optimizer over named parameter tensors."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class Adam:
    """Bias-corrected Adam. State is keyed by parameter name so it can be
    checkpointed and restored for bit-identical resumption."""

    def __init__(self, params, lr: float = 5e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params: list[tuple[str, Tensor]] = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.values) for name, p in self.params}
        self.v = {name: np.zeros_like(p.values) for name, p in self.params}

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params:
            g = p.grad
            if g is None:
                g = np.zeros_like(p.values)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            m_hat = m / bc1
            v_hat = v / bc2
            p.values -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.values.dtype)

    # -- checkpoint support --------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"adam.t": np.array([float(self.t)], dtype=np.float32).reshape(1, 1, 1, 1)}
        for name in self.m:
            out[f"adam.m.{name}"] = self.m[name]
            out[f"adam.v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.t = int(arrays["adam.t"].reshape(())) if "adam.t" in arrays else 0
        for name in self.m:
            km, kv = f"adam.m.{name}", f"adam.v.{name}"
            if km in arrays:
                self.m[name] = arrays[km].reshape(self.m[name].shape).astype(self.m[name].dtype)
            if kv in arrays:
                self.v[name] = arrays[kv].reshape(self.v[name].shape).astype(self.v[name].dtype)
