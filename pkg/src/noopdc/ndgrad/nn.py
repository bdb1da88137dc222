"""Minimal layer containers built on the functional primitives."""

from __future__ import annotations

from typing import Dict, Iterator, Optional, Tuple

import numpy as np

from . import functional as F
from .tensor import Tensor


class Module:
    """Holds parameters, buffers and child modules by attribute name."""

    training: bool = True

    def __init__(self) -> None:
        self._params: Dict[str, Tensor] = {}
        self._buffers: Dict[str, np.ndarray] = {}
        self._children: Dict[str, "Module"] = {}
        self.training = True

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and "_params" in self.__dict__:
            self._params[name] = value
        elif isinstance(value, Module) and "_children" in self.__dict__:
            self._children[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(prefix + cname + ".")

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._children.items():
            yield from child.named_buffers(prefix + cname + ".")

    def parameters(self) -> Dict[str, Tensor]:
        return dict(self.named_parameters())

    def state_dict(self, prefix: str = "") -> Dict[str, np.ndarray]:
        out = {n: p.data for n, p in self.named_parameters(prefix)}
        out.update(dict(self.named_buffers(prefix)))
        return out

    def load_state_dict(self, state: Dict[str, np.ndarray], prefix: str = "") -> None:
        params = dict(self.named_parameters(prefix))
        buffers = dict(self.named_buffers(prefix))
        expected = set(params) | set(buffers)
        missing = expected - set(state)
        if missing:
            raise KeyError(f"missing entries in state: {sorted(missing)}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.data = np.array(state[name], dtype=p.dtype)
        for name, b in buffers.items():
            if state[name].shape != b.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {b.shape}")
            b[...] = state[name]

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def requires_grad_(self, flag: bool) -> "Module":
        for _, p in self.named_parameters():
            p.requires_grad_(flag)
        return self

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.zero_grad()

    def astype(self, dtype) -> "Module":
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
            if p.grad is not None:
                p.grad = np.zeros_like(p.data)
        for name, b in list(self._buffers.items()):
            self.register_buffer(name, b.astype(dtype))
        for child in self._children.values():
            child.astype(dtype)
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2d(Module):
    def __init__(self, cin, cout, k=3, stride=1, padding=None, bias=True, rng=None, dtype=np.float32, zero=False):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        shape = (cout, cin, k, k)
        w = np.zeros(shape, dtype) if zero else _uniform(rng, shape, cin * k * k, dtype)
        self.weight = Tensor(w, requires_grad=True)
        self.bias: Optional[Tensor] = None
        if bias:
            b = np.zeros(cout, dtype) if zero else _uniform(rng, (cout,), cin * k * k, dtype)
            self.bias = Tensor(b, requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class Linear(Module):
    def __init__(self, fin, fout, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Tensor(_uniform(rng, (fin, fout), fin, dtype), requires_grad=True)
        self.bias = Tensor(_uniform(rng, (fout,), fin, dtype), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float32):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(channels, dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype), requires_grad=True)
        self.register_buffer("running_mean", np.zeros(channels, dtype))
        self.register_buffer("running_var", np.ones(channels, dtype))

    def forward(self, x: Tensor) -> Tensor:
        return F.batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            training=self.training, momentum=self.momentum, eps=self.eps,
        )


class Embedding(Module):
    def __init__(self, num: int, dim: int, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Tensor(rng.normal(0, 1, size=(num, dim)).astype(dtype), requires_grad=True)

    def forward(self, idx) -> Tensor:
        return F.embedding(self.weight, idx)
