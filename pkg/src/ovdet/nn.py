"""Parameter containers, small layers and the Adam optimizer."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    """Parameter container; discovers ``Tensor``/``Module`` attributes by name."""

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{i}", item

    def state_dict(self) -> "OrderedDict[str, Tensor]":
        return OrderedDict(self.named_parameters())

    def parameters(self) -> list:
        seen, out = set(), []
        for _, p in self.named_parameters():
            if id(p) not in seen:
                seen.add(id(p))
                out.append(p)
        return out

    def load_arrays(self, arrays: dict) -> None:
        own = self.state_dict()
        missing = sorted(set(own) - set(arrays))
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {missing[:5]}")
        for name, p in own.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return ad.parameter(rng.uniform(-bound, bound, size=shape))


class Linear(Module):
    def __init__(self, rng: np.random.Generator, n_in: int, n_out: int, bias: bool = True):
        self.weight = uniform_init(rng, n_in, (n_in, n_out))
        self.bias = uniform_init(rng, n_in, (n_out,)) if bias else None

    def __call__(self, x) -> Tensor:
        y = ad.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gamma = ad.parameter(np.ones(dim))
        self.beta = ad.parameter(np.zeros(dim))

    def __call__(self, x) -> Tensor:
        return ad.layer_norm(x, self.gamma, self.beta)


class FeedForward(Module):
    """``LN(x + W2 silu(W1 x))`` applied pointwise to every token."""

    def __init__(self, rng: np.random.Generator, dim: int, hidden: int):
        self.fc1 = Linear(rng, dim, hidden)
        self.fc2 = Linear(rng, hidden, dim)
        self.norm = LayerNorm(dim)

    def __call__(self, x) -> Tensor:
        return self.norm(x + self.fc2(ad.silu(self.fc1(x))))


class MLP(Module):
    def __init__(self, rng: np.random.Generator, dims):
        self.layers = [Linear(rng, a, b) for a, b in zip(dims[:-1], dims[1:])]

    def __call__(self, x) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = ad.silu(x)
        return x


class Adam:
    """Adam with global gradient-norm clipping; updates parameters in place."""

    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 clip_norm: float = 1.0):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]

    def step(self) -> float:
        grads = [p.grad if p.grad is not None else np.zeros(p.shape) for p in self.params]
        norm, scale = clip_scale(grads, self.clip_norm)
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            g = g * scale
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return norm


def clip_scale(grads, clip_norm: float) -> tuple:
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
    if clip_norm and norm > clip_norm:
        return norm, clip_norm / (norm + 1e-12)
    return norm, 1.0


class SGD:
    """Plain gradient descent with a fixed step and global norm clipping."""

    def __init__(self, params, lr: float = 1e-3, clip_norm: float = 1.0):
        self.params = list(params)
        self.lr = lr
        self.clip_norm = clip_norm

    def step(self) -> float:
        grads = [p.grad if p.grad is not None else np.zeros(p.shape) for p in self.params]
        norm, scale = clip_scale(grads, self.clip_norm)
        for p, g in zip(self.params, grads):
            p.data = p.data - (self.lr * scale) * g
        return norm
