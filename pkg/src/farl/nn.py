"""Parameter containers shared by the stream extractors, fusion block and encoders."""
from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    """Walks attributes to enumerate parameters under dotted names."""

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Tensor):
                out[key] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(key + "."))
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, v in enumerate(value):
                    out.update(v.named_parameters(f"{key}.{i}."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def requires_grad_(self, flag: bool) -> "Module":
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def load_state(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        params = self.named_parameters()
        if strict:
            missing = sorted(set(params) - set(state))
            if missing:
                raise KeyError(f"checkpoint lacks parameters: {missing[:5]}")
        for name, p in params.items():
            if name in state:
                arr = np.asarray(state[name], dtype=np.float64)
                if arr.shape != p.shape:
                    raise ad.ShapeError(f"{name}: checkpoint shape {arr.shape} != parameter shape {p.shape}")
                p.data = arr.copy()

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}


def param(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def uniform_fan_in(rng: np.random.Generator, fan_in: int, shape) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return param(rng.uniform(-bound, bound, size=shape))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = uniform_fan_in(rng, d_in, (d_in, d_out))
        self.bias = param(np.zeros(d_out)) if bias else None

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {f"{prefix}weight": self.weight}
        if self.bias is not None:
            out[f"{prefix}bias"] = self.bias
        return out

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.matmul(x, self.weight)
        return y if self.bias is None else y + self.bias


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gamma = param(np.ones(d))
        self.beta = param(np.zeros(d))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gamma, self.beta, eps=1e-6)


def is_decayed(name: str) -> bool:
    """Weight decay applies to matrices only; biases, norms and embeddings-as-vectors are exempt."""
    leaf = name.rsplit(".", 1)[-1]
    return leaf not in {"bias", "gamma", "beta"}
