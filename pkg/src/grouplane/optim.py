"""AdamW with decoupled weight decay."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor, load_checkpoint, save_checkpoint


class AdamW:
    def __init__(self, params: dict[str, Tensor], lr: float = 2e-4,
                 betas: tuple[float, float] = (0.9, 0.999), weight_decay: float = 0.01,
                 eps: float = 1e-8):
        if lr <= 0 or not (0 <= betas[0] < 1 and 0 <= betas[1] < 1) or weight_decay < 0:
            raise ValueError("invalid AdamW hyperparameters")
        self.params = dict(sorted(params.items()))
        self.lr = lr
        self.betas = betas
        self.weight_decay = weight_decay
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad.astype(p.data.dtype, copy=False)
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data *= 1.0 - self.lr * self.weight_decay
            p.data -= (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)

    def save(self, path) -> None:
        state = {"step": np.array([self.step_count], dtype=np.float32)}
        state.update({f"m.{k}": v for k, v in self.m.items()})
        state.update({f"v.{k}": v for k, v in self.v.items()})
        save_checkpoint(path, state)

    def load(self, path) -> None:
        state = load_checkpoint(path)
        expected = {"step"} | {f"m.{k}" for k in self.params} | {f"v.{k}" for k in self.params}
        if set(state) != expected:
            raise ValueError(f"optimizer state in {path} does not match the model parameters")
        self.step_count = int(state["step"][0])
        for k, p in self.params.items():
            self.m[k] = state[f"m.{k}"].astype(p.data.dtype)
            self.v[k] = state[f"v.{k}"].astype(p.data.dtype)
