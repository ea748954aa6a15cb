"""Parameter containers and the layers shared by encoder and decoder."""

from __future__ import annotations

from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Parameter(Tensor):
    """A leaf tensor that is trained."""

    __slots__ = ()

    def __init__(self, data):
        super().__init__(data, requires_grad=True)


class StateDictError(KeyError):
    """Parameter names or shapes disagree with the receiving module."""

    def __init__(self, missing=(), unexpected=(), mismatched=()):
        self.missing = sorted(missing)
        self.unexpected = sorted(unexpected)
        self.mismatched = sorted(mismatched)
        parts = []
        if self.missing:
            parts.append(f"missing: {', '.join(self.missing)}")
        if self.unexpected:
            parts.append(f"unexpected: {', '.join(self.unexpected)}")
        if self.mismatched:
            parts.append(f"shape mismatch: {', '.join(self.mismatched)}")
        super().__init__("; ".join(parts))

    def __str__(self) -> str:
        return self.args[0]


class Module:
    """Base class: parameters and submodules are discovered from attributes."""

    training: bool = True

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _children(self) -> Iterator[Tuple[str, object]]:
        for name, value in vars(self).items():
            if isinstance(value, (Parameter, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, v in enumerate(value):
                    yield f"{name}.{i}", v

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            else:
                yield from value.named_parameters(full + ".")

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray], strict: bool = True) -> List[str]:
        """Copy matching entries in; returns names that were loaded.

        With ``strict`` any missing or unexpected name raises StateDictError.
        Shape disagreements always raise.
        """
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        mismatched = [n for n in set(own) & set(state) if own[n].shape != np.shape(state[n])]
        if mismatched or (strict and (missing or unexpected)):
            raise StateDictError(missing if strict else (), unexpected if strict else (), mismatched)
        loaded = []
        for name in sorted(set(own) & set(state)):
            own[name].data = np.array(state[name], dtype=np.float64)
            loaded.append(name)
        return loaded


def init_normal(rng: np.random.Generator, shape, std: float = 0.02) -> Parameter:
    return Parameter(rng.normal(0.0, std, size=shape))


class Linear(Module):
    """y = x W + b with W stored as (in, out)."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True, std: float = 0.02):
        self.weight = init_normal(rng, (n_in, n_out), std)
        self.bias = Parameter(np.zeros(n_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = ad.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, width: int, eps: float = 1e-5):
        self.weight = Parameter(np.ones(width))
        self.bias = Parameter(np.zeros(width))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.weight, self.bias, self.eps)


class Embedding(Module):
    def __init__(self, n: int, width: int, rng: np.random.Generator, std: float = 0.02):
        self.weight = init_normal(rng, (n, width), std)

    def forward(self, ids) -> Tensor:
        return ad.embedding(self.weight, ids)


class Conv2d(Module):
    def __init__(
        self,
        c_in: int,
        c_out: int,
        kernel: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: int = 0,
        groups: int = 1,
        bias: bool = True,
    ):
        fan_in = (c_in // groups) * kernel * kernel
        self.weight = Parameter(rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(c_out, c_in // groups, kernel, kernel)))
        self.bias = Parameter(np.zeros(c_out)) if bias else None
        self.stride, self.padding, self.groups = stride, padding, groups

    def forward(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)


class Dropout(Module):
    def __init__(self, rate: float, rng: Optional[np.random.Generator] = None):
        self.rate = rate
        self.rng = rng if rng is not None else np.random.default_rng(0)

    def forward(self, x: Tensor) -> Tensor:
        return ad.dropout(x, self.rate, self.rng, self.training)


def fan_in_std(n_in: int) -> float:
    return 1.0 / np.sqrt(n_in)


class MLP(Module):
    def __init__(self, width: int, hidden: int, rng: np.random.Generator, fan_in: bool = False):
        self.fc = Linear(width, hidden, rng, std=fan_in_std(width) if fan_in else 0.02)
        self.proj = Linear(hidden, width, rng, std=fan_in_std(hidden) if fan_in else 0.02)

    def forward(self, x: Tensor) -> Tensor:
        return self.proj(ad.gelu(self.fc(x)))


def split_heads(x: Tensor, heads: int) -> Tensor:
    """(B, T, H) -> (B, heads, T, H/heads)."""
    b, t, h = x.shape
    return x.reshape(b, t, heads, h // heads).transpose(0, 2, 1, 3)


def merge_heads(x: Tensor) -> Tensor:
    b, nh, t, d = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, nh * d)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, mask: Optional[np.ndarray] = None):
    """Returns (output, weights); ``mask`` is additive and broadcast over the scores."""
    scores = ad.matmul(q, k.swapaxes(-1, -2)) * (1.0 / np.sqrt(q.shape[-1]))
    if mask is not None:
        scores = scores + mask
    weights = ad.softmax(scores, axis=-1)
    return ad.matmul(weights, v), weights


NEG_INF = -1e9


def causal_mask(t: int, offset: int = 0) -> np.ndarray:
    """Additive mask for ``t`` queries at positions offset..offset+t-1 over offset+t keys."""
    q = np.arange(offset, offset + t)[:, None]
    k = np.arange(offset + t)[None, :]
    return np.where(k > q, NEG_INF, 0.0)
