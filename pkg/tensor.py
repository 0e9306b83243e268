"""
tensor.py — Dense float64 arrays with reverse-mode automatic differentiation.

Every op builds a new immutable Tensor that remembers its operands and a
closure mapping the output gradient to operand gradients. ``backward`` walks the
recorded graph once in reverse topological order.

Shapes follow the model's needs: image-like ops take N×C×H×W batches (a C×H×W
input is a batch of one), fully-connected ops take n or N×n vectors, and
elementwise ops broadcast, summing gradients back over broadcast axes.
"""
import contextlib
import logging
from typing import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from config import BN_EPSILON, BN_MOMENTUM

logger = logging.getLogger(__name__)

GradFn = Callable[[np.ndarray], Sequence[tuple["Tensor", np.ndarray]]]


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


class ShapeError(ValueError):
    """Operand shapes do not fit the op."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording (inference)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    def __init__(
        self,
        data,
        _children: tuple["Tensor", ...] = (),
        op: str = "",
        requires_grad: bool = False,
        name: str = "",
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.op = op
        self.name = name
        self.requires_grad = requires_grad or (
            _grad_enabled and any(c.requires_grad for c in _children)
        )
        self._prev = _children if self.requires_grad else ()
        self._backward: GradFn | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, op={self.op or 'leaf'})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return hadamard(self, other)


def parameter(data, name: str = "") -> Tensor:
    """Leaf tensor that collects gradients."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def constant(data) -> Tensor:
    return Tensor(data)


# ── Graph ──────────────────────────────────────────────────────────────────────

class Graph:
    """Topologically ordered view of the ops reachable from a root tensor."""

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes = self._topological_order(root)

    @staticmethod
    def _topological_order(root: Tensor) -> list[Tensor]:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for child in node._prev:
                if id(child) not in seen:
                    stack.append((child, False))
        return order

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor, params: Mapping[str, Tensor] | None = None) -> dict[str, np.ndarray]:
    """
    Back-propagate a scalar loss.

    Sets ``.grad`` on every tensor of the graph that requires it and returns
    the gradients of *params* by name; a parameter the loss never touched gets
    an exact zero gradient.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {loss.shape}")
    if not _grad_enabled:
        raise RuntimeError("backward called inside no_grad()")

    graph = Graph(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.get(id(node))
        node.grad = g
        if g is None or node._backward is None:
            continue
        for child, child_grad in node._backward(g):
            if not child.requires_grad:
                continue
            if id(child) in grads:
                grads[id(child)] = grads[id(child)] + child_grad
            else:
                grads[id(child)] = child_grad

    if params is None:
        return {}
    return {
        name: (grads[id(p)] if id(p) in grads else np.zeros_like(p.data))
        for name, p in params.items()
    }


# ── Elementwise ops ────────────────────────────────────────────────────────────

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    out = _result(a.data + b.data, (a, b), "add")
    _attach(out, lambda g: ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape))))
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    out = _result(a.data - b.data, (a, b), "sub")
    _attach(out, lambda g: ((a, _unbroadcast(g, a.shape)), (b, -_unbroadcast(g, b.shape))))
    return out


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product (broadcasting)."""
    _check_broadcast(a, b, "hadamard")
    out = _result(a.data * b.data, (a, b), "hadamard")
    _attach(out, lambda g: (
        (a, _unbroadcast(g * b.data, a.shape)),
        (b, _unbroadcast(g * a.data, b.shape)),
    ))
    return out


def scale(a: Tensor, c: float) -> Tensor:
    out = _result(a.data * c, (a,), "scale")
    _attach(out, lambda g: ((a, g * c),))
    return out


def relu(x: Tensor) -> Tensor:
    # subgradient at 0 is 0
    mask = x.data > 0
    out = _result(np.where(mask, x.data, 0.0), (x,), "relu")
    _attach(out, lambda g: ((x, g * mask),))
    return out


def tanh_op(x: Tensor) -> Tensor:
    out = _result(np.tanh(x.data), (x,), "tanh")
    _attach(out, lambda g: ((x, g * (1.0 - out.data ** 2)),))
    return out


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = _result(x.data.reshape(shape), (x,), "reshape")
    _attach(out, lambda g: ((x, g.reshape(x.shape)),))
    return out


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of no tensors")
    out = _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), "concat")
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def _grad(g):
        return tuple(zip(tensors, np.split(g, bounds, axis=axis)))

    _attach(out, _grad)
    return out


def sum_all(x: Tensor) -> Tensor:
    out = _result(np.sum(x.data), (x,), "sum")
    _attach(out, lambda g: ((x, np.broadcast_to(g, x.shape).copy()),))
    return out


# ── Layers ─────────────────────────────────────────────────────────────────────

def same_padding(k: int) -> tuple[int, int]:
    """(low, high) zero padding for a stride-1 'same' convolution; even k pads more on the high side."""
    low = (k - 1) // 2
    return low, k - 1 - low


def conv2d_same(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """
    Zero-padded stride-1 convolution preserving spatial size.

    x: N×C_in×H×W (or C_in×H×W), weight: C_out×C_in×k×k, bias: C_out.
    """
    if x.ndim == 3:
        out = conv2d_same(reshape(x, (1,) + x.shape), weight, bias)
        return reshape(out, out.shape[1:])
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d_same expects 4-d input and weight, got {x.shape} and {weight.shape}")
    n, c_in, h, w = x.shape
    c_out, c_in_w, kh, kw = weight.shape
    if c_in != c_in_w or kh != kw:
        raise ShapeError(f"conv2d_same: input {x.shape} incompatible with weight {weight.shape}")
    if bias.shape != (c_out,):
        raise ShapeError(f"conv2d_same: bias shape {bias.shape} != ({c_out},)")

    k = kh
    lo, hi = same_padding(k)
    xp = np.pad(x.data, ((0, 0), (0, 0), (lo, hi), (lo, hi)))
    cols = sliding_window_view(xp, (k, k), axis=(2, 3))          # n, c_in, h, w, k, k
    y = np.tensordot(cols, weight.data, axes=([1, 4, 5], [1, 2, 3]))  # n, h, w, c_out
    y = y.transpose(0, 3, 1, 2) + bias.data[None, :, None, None]
    out = _result(np.ascontiguousarray(y), (x, weight, bias), "conv2d")

    def _grad(g):
        grad_w = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))  # c_out, c_in, k, k
        grad_b = g.sum(axis=(0, 2, 3))
        grad_xp = np.zeros_like(xp)
        for di in range(k):
            for dj in range(k):
                contrib = np.tensordot(g, weight.data[:, :, di, dj], axes=([1], [0]))  # n, h, w, c_in
                grad_xp[:, :, di:di + h, dj:dj + w] += contrib.transpose(0, 3, 1, 2)
        grad_x = grad_xp[:, :, lo:lo + h, lo:lo + w]
        return ((x, grad_x), (weight, grad_w), (bias, grad_b))

    _attach(out, _grad)
    return out


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """weight (m×n) · x (n or N×n) + bias (m)."""
    m, n_in = weight.shape if weight.ndim == 2 else (None, None)
    if m is None or x.shape[-1] != n_in or bias.shape != (m,) or x.ndim not in (1, 2):
        raise ShapeError(
            f"fully_connected: x {x.shape}, weight {weight.shape}, bias {bias.shape} do not fit"
        )
    out = _result(x.data @ weight.data.T + bias.data, (x, weight, bias), "fc")

    def _grad(g):
        if x.ndim == 1:
            return ((x, g @ weight.data), (weight, np.outer(g, x.data)), (bias, g))
        return ((x, g @ weight.data), (weight, g.T @ x.data), (bias, g.sum(axis=0)))

    _attach(out, _grad)
    return out


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPSILON,
) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """
    Per-channel batch normalisation over batch×H×W.

    Returns (output, new_running_mean, new_running_var); in inference mode the
    running statistics come back unchanged. Running variance tracks the biased
    batch variance.
    """
    if x.ndim == 3:
        y, rm, rv = batch_norm(reshape(x, (1,) + x.shape), gamma, beta,
                               running_mean, running_var, training, momentum, eps)
        return reshape(y, x.shape), rm, rv
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: gamma/beta must be ({c},), got {gamma.shape}/{beta.shape}")

    axes = (0, 2, 3)
    bshape = (1, c, 1, 1)
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        new_mean = momentum * running_mean + (1.0 - momentum) * mu
        new_var = momentum * running_var + (1.0 - momentum) * var
    else:
        mu, var = running_mean, running_var
        new_mean, new_var = running_mean, running_var

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(bshape)) * inv_std.reshape(bshape)
    out = _result(gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape),
                  (x, gamma, beta), "batch_norm")
    m = x.data.size // c

    def _grad(g):
        grad_gamma = (g * xhat).sum(axis=axes)
        grad_beta = g.sum(axis=axes)
        gxhat = g * gamma.data.reshape(bshape)
        if training:
            grad_x = (inv_std.reshape(bshape) / m) * (
                m * gxhat
                - gxhat.sum(axis=axes).reshape(bshape)
                - xhat * (gxhat * xhat).sum(axis=axes).reshape(bshape)
            )
        else:
            grad_x = gxhat * inv_std.reshape(bshape)
        return ((x, grad_x), (gamma, grad_gamma), (beta, grad_beta))

    _attach(out, _grad)
    return out, new_mean, new_var


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean over all elements of the squared difference."""
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: pred {pred.shape} vs target {target.shape}")
    diff = pred.data - target.data
    out = _result(np.mean(diff ** 2), (pred, target), "mse")
    n = diff.size
    _attach(out, lambda g: ((pred, g * 2.0 * diff / n), (target, -g * 2.0 * diff / n)))
    return out


# ── Private helpers ────────────────────────────────────────────────────────────

def _result(data: np.ndarray, children: tuple[Tensor, ...], op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    return Tensor(data, children, op)


def _attach(out: Tensor, fn: GradFn) -> None:
    if out.requires_grad:
        out._backward = fn


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum *g* down to *shape* over broadcast axes."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from exc


def leaves(named: Mapping[str, np.ndarray], trainable: Iterable[str]) -> dict[str, Tensor]:
    """Wrap arrays as tensors; names in *trainable* become gradient-collecting leaves."""
    trainable = set(trainable)
    return {
        name: (parameter(arr, name) if name in trainable else constant(arr))
        for name, arr in named.items()
    }
