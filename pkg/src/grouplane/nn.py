"""Parameter containers and the two layer types the network uses."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor, conv2d_grouped, get_default_dtype, linear


class Module:
    """Holds parameters as attributes; sub-modules and lists of them nest."""

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    out[key] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(key + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{key}.{i}."))
        return out

    def parameters(self) -> list[Tensor]:
        params = self.named_parameters()
        return [params[k] for k in sorted(params)]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = sorted(set(params) - set(state))
        extra = sorted(set(state) - set(params))
        if missing or extra:
            raise KeyError(f"state mismatch: missing={missing} unexpected={extra}")
        for name, p in params.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ValueError(f"{name}: shape {value.shape} != {p.shape}")
            p.data = value.astype(p.dtype, copy=True)


def _param(arr: np.ndarray) -> Tensor:
    return Tensor(arr, requires_grad=True, dtype=get_default_dtype())


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, kernel: int = 1, stride: int = 1, padding: int = 0,
                 groups: int = 1, rng: np.random.Generator | None = None, zero_init: bool = False,
                 bias_init: float = 0.0):
        if cin % groups or cout % groups:
            raise ValueError(f"groups={groups} must divide cin={cin} and cout={cout}")
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = cin // groups * kernel * kernel
        shape = (cout, cin // groups, kernel, kernel)
        w = np.zeros(shape) if zero_init else rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        self.weight = _param(w)
        self.bias = _param(np.full(cout, 0.0 if zero_init else bias_init))
        self.stride = stride
        self.padding = padding
        self.groups = groups

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d_grouped(x, self.weight, self.bias, groups=self.groups,
                              stride=self.stride, padding=self.padding)


class Linear(Module):
    def __init__(self, fin: int, fout: int, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = _param(rng.normal(0.0, np.sqrt(1.0 / fin), size=(fout, fin)))
        self.bias = _param(np.zeros(fout))

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)
