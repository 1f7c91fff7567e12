"""Parameter containers and the static layers shared by every model path."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterator

import numpy as np

from . import autograd as ag
from .autograd import Tensor


class Parameter(Tensor):
    def __init__(self, values, dtype=None):
        super().__init__(values, requires_grad=True, dtype=dtype)


class Module:
    """Minimal module tree: parameters are discovered from attributes."""

    training: bool = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    yield f"{name}.{i}", item
            elif isinstance(value, dict):
                for key, item in value.items():
                    yield f"{name}.{key}", item
            else:
                yield name, value

    def named_parameters(self, prefix: str = "", _seen: set | None = None) -> Iterator[tuple[str, Parameter]]:
        seen = set() if _seen is None else _seen
        for name, value in self._children():
            if isinstance(value, Parameter):
                if id(value) not in seen:
                    seen.add(id(value))
                    yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.", seen)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise KeyError(f"state mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for name, p in own.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ag.ShapeError(f"parameter {name}: expected shape {p.shape}, found {value.shape}")
            p.data = np.array(value, dtype=p.data.dtype)


def uniform_init(rng: np.random.Generator, fan_in: int, shape: tuple[int, ...]) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True):
        self.in_dim, self.out_dim = in_dim, out_dim
        self.weight = Parameter(uniform_init(rng, in_dim, (in_dim, out_dim)))
        self.bias = Parameter(np.zeros(out_dim)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise ag.ShapeError(f"Linear: expected input dim {self.in_dim}, got shape {x.shape}")
        single = x.ndim == 1
        if single:
            x = ag.reshape(x, (1, self.in_dim))
        out = ag.matmul(x, self.weight)
        if self.bias is not None:
            out = out + self.bias
        return ag.reshape(out, (self.out_dim,)) if single else out


class LayerNorm(Module):
    def __init__(self, dim: int, affine: bool = True, eps: float = ag.LN_EPS):
        self.dim, self.eps = dim, eps
        self.gain = Parameter(np.ones(dim)) if affine else None
        self.bias = Parameter(np.zeros(dim)) if affine else None

    def forward(self, x: Tensor) -> Tensor:
        out = ag.layer_norm(x, self.eps)
        if self.gain is not None:
            out = out * self.gain + self.bias
        return out


class Dropout(Module):
    def __init__(self, rate: float, rng: np.random.Generator):
        if not 0 <= rate < 1:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate, self.rng = rate, rng

    def forward(self, x: Tensor) -> Tensor:
        if not self.training or self.rate == 0:
            return x
        keep = self.rng.random(x.shape) >= self.rate
        return x * Tensor(keep / (1.0 - self.rate), dtype=x.data.dtype)


class Stack(Module):
    """Linear -> LayerNorm -> ReLU."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, affine: bool = True):
        self.linear = Linear(in_dim, out_dim, rng)
        self.norm = LayerNorm(out_dim, affine=affine)

    def forward(self, x: Tensor) -> Tensor:
        return ag.relu(self.norm(self.linear(x)))


def params_to_json(params: dict[str, np.ndarray]) -> dict:
    return {name: {"shape": list(v.shape), "values": v.reshape(-1).tolist()} for name, v in params.items()}


def params_from_json(doc: dict) -> dict[str, np.ndarray]:
    out = {}
    for name, entry in doc.items():
        values = np.asarray(entry["values"], dtype=np.float64)
        out[name] = values.reshape(entry["shape"])
    return out


def save_parameters(module: Module, path: str | Path) -> None:
    Path(path).write_text(json.dumps(params_to_json(module.state_dict())))


def load_parameters(module: Module, path: str | Path) -> None:
    module.load_state_dict(params_from_json(json.loads(Path(path).read_text())))
