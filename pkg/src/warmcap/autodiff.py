"""Dense float64 tensors with eager reverse-mode automatic differentiation.

Every operation records its inputs and a closure computing the vector-Jacobian
product, so the graph reachable from a scalar loss is the computation tape.
``backward`` orders that graph topologically and walks it once in reverse.
"""

from __future__ import annotations

import math
import warnings
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterator, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "ShapeError",
    "TapeError",
    "NonFiniteError",
    "EmptyLossWarning",
    "no_grad",
    "is_grad_enabled",
    "tape",
    "matmul",
    "conv2d",
    "softmax",
    "log_softmax",
    "layer_norm",
    "gelu",
    "relu",
    "tanh",
    "exp",
    "log",
    "sigmoid",
    "concat",
    "stack",
    "embedding",
    "dropout",
    "cross_entropy",
    "binary_cross_entropy_with_logits",
]

ArrayLike = Union[np.ndarray, float, int, Sequence]

GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715

_grad_enabled = True
check_finite = True


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class TapeError(RuntimeError):
    """Backward was requested on a graph that cannot be differentiated."""


class NonFiniteError(FloatingPointError):
    """A forward operation produced NaN or Inf."""


class EmptyLossWarning(UserWarning):
    """A loss was averaged over zero contributing positions and defined as 0."""


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph construction inside the block."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled() -> bool:
    return _grad_enabled


def _as_array(data: ArrayLike) -> np.ndarray:
    if isinstance(data, np.ndarray) and data.dtype == np.float64:
        return data
    return np.asarray(data, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """n-dimensional float64 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_consumed")
    __array_priority__ = 1000

    def __init__(self, data: ArrayLike, requires_grad: bool = False):
        self.data = _as_array(data)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._op = "leaf"
        self._consumed = False

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- graph plumbing ---------------------------------------------------
    @staticmethod
    def _make(data: np.ndarray, parents: tuple, backward: Callable, op: str) -> "Tensor":
        if check_finite and not np.isfinite(data).all():
            raise NonFiniteError(f"non-finite values produced by {op}")
        out = Tensor(data)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
            out._op = op
        return out

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every requires_grad leaf."""
        if self.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise TapeError("backward already ran on this graph; rebuild the forward pass")
        if not self.requires_grad:
            raise TapeError("loss is detached: no input requires grad")
        order = tape(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if node.is_leaf:
                if g is not None:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            if node._backward is None:
                raise TapeError(f"graph through {node._op} was already consumed")
            if g is not None:
                for parent, pg in zip(node._parents, node._backward(g)):
                    if pg is None or not parent.requires_grad:
                        continue
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
            node._backward = None
            node._consumed = True

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int) -> "Tensor":
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    @property
    def T(self) -> "Tensor":
        return transpose(self, None)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class TapeRecord:
    op: str
    inputs: tuple
    output: int


def tape(root: Tensor) -> list:
    """Tensors reachable from ``root`` in topological order (inputs first)."""
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def tape_records(root: Tensor) -> list:
    """Describe the tape of ``root`` as (op, input ids, output id) records."""
    return [TapeRecord(t._op, tuple(id(p) for p in t._parents), id(t)) for t in tape(root) if not t.is_leaf]


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    sa, sb = a.shape, b.shape
    return Tensor._make(
        a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add"
    )


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    sa, sb = a.shape, b.shape
    return Tensor._make(
        a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub"
    )


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    ad, bd = a.data, b.data

    def backward(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return Tensor._make(ad * bd, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return Tensor._make(out, (a, b), backward, "div")


def power(a: Tensor, exponent: float) -> Tensor:
    ad = a.data
    return Tensor._make(
        ad**exponent, (a,), lambda g: (g * exponent * ad ** (exponent - 1),), "pow"
    )


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor._make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor._make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return Tensor._make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor._make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    x = a.data
    x2 = x * x
    inner = GELU_C * x * (1.0 + GELU_A * x2)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = GELU_C * (1.0 + 3.0 * GELU_A * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return Tensor._make(out, (a,), backward, "gelu")


# ---------------------------------------------------------------------------
# reductions and shape manipulation


def _norm_axes(axis, ndim: int):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._make(a.data.sum(axis=axes, keepdims=keepdims), (a,), backward, "sum")


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return reduce_sum(a, axes, keepdims) * (1.0 / count)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    old = a.shape
    return Tensor._make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes: Optional[tuple]) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return Tensor._make(
        a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose"
    )


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice, type(None), type(Ellipsis))) for i in items)


def getitem(a: Tensor, index) -> Tensor:
    shape = a.shape
    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros(shape)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return Tensor._make(a.data[index], (a,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return Tensor._make(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), backward, "stack")


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Rows of ``weight`` selected by integer ``ids`` (any shape)."""
    ids = np.asarray(ids, dtype=np.int64)
    vocab, width = weight.shape
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise ShapeError(f"token id out of range for embedding with {vocab} rows")

    def backward(g):
        full = np.zeros((vocab, width))
        np.add.at(full, ids.reshape(-1), g.reshape(-1, width))
        return (full,)

    return Tensor._make(weight.data[ids], (weight,), backward, "embedding")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes with broadcast batch axes."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if bd.ndim == 2:
                # fold the batch axes into one product instead of summing per-batch products
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return Tensor._make(ad @ bd, (a, b), backward, "matmul")


def _pair(v) -> tuple:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x, weight, bias=None, stride=1, padding=0, groups: int = 1) -> Tensor:
    """2-D cross-correlation.

    ``x`` is C x H x W or N x C x H x W; ``weight`` is Cout x (C / groups) x kh x kw.
    Depthwise convolution is ``groups == C``.
    """
    x, weight = _wrap(x), _wrap(weight)
    squeeze = x.ndim == 3
    X = x.data[None] if squeeze else x.data
    if X.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects (N,)C,H,W input and 4-D kernel, got {x.shape}, {weight.shape}")
    n, c, h, w = X.shape
    cout, cin_g, kh, kw = weight.shape
    if cin_g * groups != c or cout % groups:
        raise ShapeError(
            f"conv2d channel mismatch: input has {c} channels, kernel {weight.shape} with groups={groups}"
        )
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    ho, wo = conv_output_size(h, kh, sh, ph), conv_output_size(w, kw, sw, pw)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output would be {ho}x{wo} for input {h}x{w}, kernel {kh}x{kw}")
    Xp = np.pad(X, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else X
    W = weight.data
    cout_g = cout // groups
    depthwise = cin_g == 1 and cout_g == 1

    def window(i, j, arr):
        return arr[:, :, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw]

    if depthwise:
        out = np.zeros((n, c, ho, wo))
        for i in range(kh):
            for j in range(kw):
                out += window(i, j, Xp) * W[:, 0, i, j][None, :, None, None]
    else:
        win = sliding_window_view(Xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :ho, :wo]
        parts = []
        for gi in range(groups):
            wg = W[gi * cout_g : (gi + 1) * cout_g]
            xg = win[:, gi * cin_g : (gi + 1) * cin_g]
            parts.append(np.tensordot(xg, wg, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2))
        out = parts[0] if groups == 1 else np.concatenate(parts, axis=1)
    parents = [x, weight]
    if bias is not None:
        bias = _wrap(bias)
        out = out + bias.data[None, :, None, None]
        parents.append(bias)
    if squeeze:
        out = out[0]

    def backward(g):
        G = g[None] if squeeze else g
        gx = gw = gb = None
        if x.requires_grad:
            gXp = np.zeros_like(Xp)
            for i in range(kh):
                for j in range(kw):
                    target = window(i, j, gXp)
                    if depthwise:
                        target += G * W[:, 0, i, j][None, :, None, None]
                    else:
                        for gi in range(groups):
                            wg = W[gi * cout_g : (gi + 1) * cout_g, :, i, j]
                            gg = G[:, gi * cout_g : (gi + 1) * cout_g]
                            target[:, gi * cin_g : (gi + 1) * cin_g] += np.tensordot(
                                gg, wg, axes=([1], [0])
                            ).transpose(0, 3, 1, 2)
            gx = gXp[:, :, ph : ph + h, pw : pw + w]
            if squeeze:
                gx = gx[0]
        if weight.requires_grad and not depthwise:
            gw = np.zeros_like(W)
            for gi in range(groups):
                gg = G[:, gi * cout_g : (gi + 1) * cout_g]
                xg = win[:, gi * cin_g : (gi + 1) * cin_g]
                gw[gi * cout_g : (gi + 1) * cout_g] = np.tensordot(gg, xg, axes=([0, 2, 3], [0, 2, 3]))
        elif weight.requires_grad:
            gw = np.zeros_like(W)
            for i in range(kh):
                for j in range(kw):
                    xw = window(i, j, Xp)
                    if depthwise:
                        gw[:, 0, i, j] = np.einsum("nchw,nchw->c", G, xw)
                    else:
                        for gi in range(groups):
                            gg = G[:, gi * cout_g : (gi + 1) * cout_g]
                            xg = xw[:, gi * cin_g : (gi + 1) * cin_g]
                            gw[gi * cout_g : (gi + 1) * cout_g, :, i, j] = np.tensordot(
                                gg, xg, axes=([0, 2, 3], [0, 2, 3])
                            )
        if bias is not None and bias.requires_grad:
            gb = G.sum(axis=(0, 2, 3))
        return (gx, gw, gb) if bias is not None else (gx, gw)

    return Tensor._make(out, tuple(parents), backward, "conv2d")


# ---------------------------------------------------------------------------
# normalisation and probability


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._make(out, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return Tensor._make(out, (x,), backward, "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then scale and shift."""
    x, gain, bias = _wrap(x), _wrap(gain), _wrap(bias)
    width = x.shape[-1]
    if gain.shape != (width,) or bias.shape != (width,):
        raise ShapeError(f"layer_norm gain/bias {gain.shape}/{bias.shape} do not match last axis {width}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv
    G, B = gain.data, bias.data

    def backward(g):
        gx = None
        if x.requires_grad:
            gh = g * G
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        ggain = (g * xhat).sum(axis=lead) if gain.requires_grad else None
        gbias = g.sum(axis=lead) if bias.requires_grad else None
        return gx, ggain, gbias

    return Tensor._make(xhat * G + B, (x, gain, bias), backward, "layer_norm")


def dropout(x: Tensor, rate: float, rng: np.random.Generator, training: bool = True) -> Tensor:
    if not training or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return Tensor._make(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# ---------------------------------------------------------------------------
# losses


def cross_entropy(logits: Tensor, targets: ArrayLike, ignore_id: Optional[int] = None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under softmax(``logits``).

    Positions whose target equals ``ignore_id`` are excluded from numerator and
    count. If every position is ignored the loss is 0 and an EmptyLossWarning is
    emitted.
    """
    targets = np.asarray(targets, dtype=np.int64)
    vocab = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"targets {targets.shape} do not match logits {logits.shape}")
    flat_logits = logits.data.reshape(-1, vocab)
    flat_t = targets.reshape(-1)
    keep = np.ones_like(flat_t, dtype=bool) if ignore_id is None else flat_t != ignore_id
    bad = keep & ((flat_t < 0) | (flat_t >= vocab))
    if bad.any():
        raise ShapeError(f"target id {int(flat_t[bad][0])} outside vocabulary of size {vocab}")
    count = int(keep.sum())
    if count == 0:
        warnings.warn("cross_entropy over zero positions; defined as 0", EmptyLossWarning, stacklevel=2)
        return Tensor._make(np.zeros(()), (logits,), lambda g: (np.zeros(logits.shape),), "cross_entropy")
    z = flat_logits - flat_logits.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logz
    rows = np.nonzero(keep)[0]
    loss = -logp[rows, flat_t[rows]].sum() / count

    def backward(g):
        grad = np.exp(logp)
        grad[rows, flat_t[rows]] -= 1.0
        grad *= keep[:, None] * (float(g) / count)
        return (grad.reshape(logits.shape),)

    return Tensor._make(np.asarray(loss), (logits,), backward, "cross_entropy")


def binary_cross_entropy_with_logits(logits: Tensor, targets: ArrayLike) -> Tensor:
    """Mean elementwise binary cross-entropy on raw logits."""
    y = np.asarray(targets, dtype=np.float64)
    if y.shape != logits.shape:
        raise ShapeError(f"targets {y.shape} do not match logits {logits.shape}")
    x = logits.data
    loss = (np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))).mean()
    probs = 0.5 * (1.0 + np.tanh(0.5 * x))

    def backward(g):
        return ((probs - y) * (float(g) / x.size),)

    return Tensor._make(np.asarray(loss), (logits,), backward, "bce_logits")
