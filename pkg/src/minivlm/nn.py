"""Parameter containers and reusable layers on top of :mod:`minivlm.tensor`."""

from __future__ import annotations

from typing import Dict, Iterator, Tuple

import numpy as np

from . import tensor as T
from .tensor import Tensor

INIT_STD = 0.02


def param(rng: np.random.Generator, *shape, std: float = INIT_STD) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True, dtype=T.get_default_dtype())


def zeros(*shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, dtype=T.get_default_dtype())


def ones(*shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True, dtype=T.get_default_dtype())


class Module:
    """Base class; parameters are discovered from attributes.

    Tensor attributes are parameters, Module attributes and lists of Modules
    are children.  Names are dotted paths, e.g. ``blocks.0.attn.wq``.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: checkpoint {arr.shape}, model {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def requires_grad_(self, flag: bool) -> "Module":
        for p in self.parameters():
            p.requires_grad = flag
            if not flag:
                p.grad = None
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return int(np.sum([p.size for p in self.parameters()], dtype=np.int64))

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, rng, d_in: int, d_out: int, bias: bool = True):
        self.weight = param(rng, d_in, d_out)
        if bias:
            self.bias = zeros(d_out)

    def forward(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        return T.add(y, self.bias) if hasattr(self, "bias") else y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.weight = ones(dim)
        self.bias = zeros(dim)
        self._eps = eps

    def forward(self, x):
        return T.layer_norm(x, self.weight, self.bias, self._eps)


class RMSNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        self.weight = ones(dim)
        self._eps = eps

    def forward(self, x):
        return T.rms_norm(x, self.weight, self._eps)


def split_heads(x: Tensor, num_heads: int) -> Tensor:
    b, n, d = x.shape
    return T.transpose(T.reshape(x, (b, n, num_heads, d // num_heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    b, h, n, dh = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, n, h * dh))


def attention(q: Tensor, k: Tensor, v: Tensor, causal: bool, probs_out: list = None) -> Tensor:
    """Scaled dot-product attention over [B, H, L, dh] heads.

    When ``probs_out`` is a list, the attention probabilities are appended to it.
    """
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(q.shape[-1]))
    if causal:
        scores = T.causal_mask_fill(scores)
    probs = T.softmax(scores, axis=-1)
    if probs_out is not None:
        probs_out.append(probs.data)
    return T.matmul(probs, v)
