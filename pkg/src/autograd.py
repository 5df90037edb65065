#!/usr/bin/env python3
"""
MSVL Toolkit — Reverse-Mode Differentiation on numpy Arrays

Define-by-run: every primitive builds a new Tensor that remembers its parents
and a closure that pushes the upstream gradient back to them. `backward` walks
the tape once in reverse topological order.
"""
from __future__ import annotations

from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from utils.errors import NumericFault, RejectedInputError

ArrayLike = Union[np.ndarray, float, int, Sequence[float]]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, op: str = "leaf",
                 parents: Tuple["Tensor", ...] = ()):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.op = op
        self._parents = parents
        self._backward: Callable[[np.ndarray], None] = lambda g: None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __matmul__(self, other): return matmul(self, other)

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        self.grad = g.copy() if self.grad is None else self.grad + g


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, op: str, parents: Tuple[Tensor, ...]) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericFault("non-finite value in forward pass", node=op)
    return Tensor(data, requires_grad=any(p.requires_grad for p in parents), op=op, parents=parents)


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum `g` down to `shape` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise RejectedInputError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -------------------------------
# Elementwise
# -------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    out = _result(a.data + b.data, "add", (a, b))

    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))
    out._backward = backward
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    out = _result(a.data * b.data, "mul", (a, b))

    def backward(g):
        a._accumulate(_unbroadcast(g * b.data, a.shape))
        b._accumulate(_unbroadcast(g * a.data, b.shape))
    out._backward = backward
    return out


def relu(x: Tensor) -> Tensor:
    out = _result(np.maximum(x.data, 0.0), "relu", (x,))

    def backward(g):
        x._accumulate(g * (x.data > 0.0))
    out._backward = backward
    return out


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    out = _result(np.where(x.data > 0.0, x.data, slope * x.data), "leaky_relu", (x,))

    def backward(g):
        x._accumulate(g * np.where(x.data > 0.0, 1.0, slope))
    out._backward = backward
    return out


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    z = x.data
    e = np.exp(-np.abs(z))
    s = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    out = _result(s, "sigmoid", (x,))

    def backward(g):
        x._accumulate(g * s * (1.0 - s))
    out._backward = backward
    return out


def softmax(x: Tensor, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
    """Softmax along `axis`. With `mask`, entries where mask is False get probability 0."""
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        if not np.all(mask.any(axis=axis)):
            raise RejectedInputError("softmax: a row has no unmasked entries")
        z = np.where(mask, z, -np.inf)
    shifted = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(shifted)
    if mask is not None:
        e = np.where(mask, e, 0.0)
    p = e / e.sum(axis=axis, keepdims=True)
    out = _result(p, "softmax", (x,))

    def backward(g):
        dot = (g * p).sum(axis=axis, keepdims=True)
        x._accumulate(p * (g - dot))
    out._backward = backward
    return out


# -------------------------------
# Shape
# -------------------------------
def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise RejectedInputError(f"reshape: cannot view {x.shape} as {shape}") from None
    out = _result(data, "reshape", (x,))

    def backward(g):
        x._accumulate(g.reshape(x.shape))
    out._backward = backward
    return out


def transpose(x: Tensor, axes: Optional[Tuple[int, ...]] = None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.data.ndim - 2)) + (x.data.ndim - 1, x.data.ndim - 2)
    inverse = tuple(np.argsort(axes))
    out = _result(np.transpose(x.data, axes), "transpose", (x,))

    def backward(g):
        x._accumulate(np.transpose(g, inverse))
    out._backward = backward
    return out


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    try:
        data = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError:
        raise RejectedInputError(f"concat: incompatible shapes {[x.shape for x in xs]}") from None
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]
    out = _result(data, "concat", tuple(xs))

    def backward(g):
        for x, piece in zip(xs, np.split(g, sizes, axis=axis)):
            x._accumulate(piece)
    out._backward = backward
    return out


def mean(x: Tensor, axis: Union[int, Tuple[int, ...], None] = None) -> Tensor:
    out = _result(np.mean(x.data, axis=axis), "mean", (x,))
    count = x.data.size // max(out.data.size, 1)

    def backward(g):
        g = np.asarray(g)
        if axis is not None:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g, x.shape) / count)
    out._backward = backward
    return out


def sum_all(x: Tensor) -> Tensor:
    out = _result(np.sum(x.data), "sum", (x,))

    def backward(g):
        x._accumulate(np.broadcast_to(g, x.shape).copy())
    out._backward = backward
    return out


# -------------------------------
# Linear algebra
# -------------------------------
def matmul(a, b) -> Tensor:
    """np.matmul with batch broadcasting; gradients are summed over broadcast batch axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise RejectedInputError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = _result(np.matmul(a.data, b.data), "matmul", (a, b))

    def backward(g):
        a._accumulate(_unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        b._accumulate(_unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))
    out._backward = backward
    return out


def fully_connected(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x (..., in) @ weight (in, out) + bias (out)."""
    if x.shape[-1] != weight.shape[0]:
        raise RejectedInputError(f"fully_connected: input {x.shape} does not match weight {weight.shape}")
    out = matmul(x, weight)
    return add(out, bias) if bias is not None else out


def global_average_pool(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C)."""
    if x.data.ndim != 4:
        raise RejectedInputError(f"global_average_pool expects (N, C, H, W), got {x.shape}")
    return mean(x, axis=(2, 3))


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """Grouped 2-D cross-correlation. x (N, C, H, W), weight (O, C/groups, kh, kw)."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise RejectedInputError(f"conv2d: expected 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, cg, kh, kw = weight.shape
    if groups < 1 or c % groups or o % groups or cg != c // groups:
        raise RejectedInputError(f"conv2d: input {x.shape} and weight {weight.shape} do not fit groups={groups}")
    if bias is not None and bias.shape != (o,):
        raise RejectedInputError(f"conv2d: bias {bias.shape} does not match {o} output channels")
    og = o // groups
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    if xp.shape[2] < kh or xp.shape[3] < kw:
        raise RejectedInputError(f"conv2d: kernel {kh}x{kw} larger than padded input {xp.shape[2:]}")
    # (N, C, Ho, Wo, kh, kw)
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = windows.shape[2], windows.shape[3]

    pieces = []
    for gi in range(groups):
        xg = windows[:, gi * cg:(gi + 1) * cg]
        wg = weight.data[gi * og:(gi + 1) * og]
        pieces.append(np.tensordot(xg, wg, axes=([1, 4, 5], [1, 2, 3])))  # (N, Ho, Wo, og)
    data = np.concatenate(pieces, axis=-1).transpose(0, 3, 1, 2)
    if bias is not None:
        data = data + bias.data[None, :, None, None]
    parents = (x, weight) if bias is None else (x, weight, bias)
    out = _result(np.ascontiguousarray(data), "conv2d", parents)

    def backward(g):
        if bias is not None:
            bias._accumulate(g.sum(axis=(0, 2, 3)))
        dw = np.empty_like(weight.data) if weight.requires_grad else None
        dxp = np.zeros_like(xp) if x.requires_grad else None
        for gi in range(groups):
            gg = g[:, gi * og:(gi + 1) * og]
            xg = windows[:, gi * cg:(gi + 1) * cg]
            if dw is not None:
                dw[gi * og:(gi + 1) * og] = np.tensordot(gg, xg, axes=([0, 2, 3], [0, 2, 3]))
            if dxp is not None:
                wg = weight.data[gi * og:(gi + 1) * og]
                cols = np.tensordot(gg, wg, axes=([1], [0]))  # (N, Ho, Wo, cg, kh, kw)
                for i in range(kh):
                    for j in range(kw):
                        dxp[:, gi * cg:(gi + 1) * cg,
                            i:i + stride * ho:stride,
                            j:j + stride * wo:stride] += cols[..., i, j].transpose(0, 3, 1, 2)
        if dw is not None:
            weight._accumulate(dw)
        if dxp is not None:
            x._accumulate(dxp[:, :, padding:padding + h, padding:padding + w])
    out._backward = backward
    return out


# -------------------------------
# Loss
# -------------------------------
def cross_entropy_loss(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of integer `labels` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise RejectedInputError(f"cross_entropy_loss: logits {logits.shape} vs labels {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= logits.shape[1]:
        raise RejectedInputError("cross_entropy_loss: label out of range")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    log_p = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    out = _result(np.asarray(-log_p[np.arange(n), labels].mean()), "cross_entropy", (logits,))

    def backward(g):
        d = np.exp(log_p)
        d[np.arange(n), labels] -= 1.0
        logits._accumulate(g * d / n)
    out._backward = backward
    return out


# -------------------------------
# Evaluation
# -------------------------------
def _topological(output: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    seen = set()
    stack = [(output, False)]
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
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(output: Tensor) -> None:
    if output.data.size != 1:
        raise RejectedInputError(f"backward needs a scalar output, got shape {output.shape}")
    order = _topological(output)
    for node in order:
        node.grad = None
    output.grad = np.ones_like(output.data)
    for node in reversed(order):
        if node.grad is None or not node._parents:
            continue
        node._backward(node.grad)
        if not np.all(np.isfinite(node.grad)):
            raise NumericFault("non-finite gradient in backward pass", node=node.op)


def eval_with_grads(output: Tensor, params: Sequence[Tensor]) -> Tuple[float, List[np.ndarray]]:
    """Scalar value of `output` and d(output)/d(param) for every param (zeros if unused)."""
    if output.data.size != 1:
        raise RejectedInputError(f"eval_with_grads needs a scalar output, got shape {output.shape}")
    for p in params:
        p.grad = None
    backward(output)
    grads = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]
    return float(output.data.reshape(())), grads


def finite_diff_grad(f: Callable[[np.ndarray], float], x: ArrayLike, eps: float = 1e-5) -> np.ndarray:
    """Central differences (f(x + eps e_i) - f(x - eps e_i)) / 2 eps for every coordinate."""
    if eps <= 0:
        raise RejectedInputError(f"eps must be > 0, got {eps}")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + eps
        up = float(f(base))
        flat[i] = keep - eps
        down = float(f(base))
        flat[i] = keep
        out[i] = (up - down) / (2.0 * eps)
    return grad


# -------------------------------
# Initialization
# -------------------------------
def he_uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> Tensor:
    bound = np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, op="param")


def xavier_uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int, fan_out: int) -> Tensor:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, op="param")


def zeros(shape: Tuple[int, ...]) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, op="param")
