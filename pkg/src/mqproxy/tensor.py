"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

A :class:`Tape` records every primitive applied to tensors that live on it.
Tensors created without a tape are constants and never receive gradients.
Only the primitives needed by the small reference networks are provided;
broadcasting is limited to adding a bias row to a batch.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when a primitive receives operands of incompatible shape."""

    def __init__(self, op: str, message: str):
        super().__init__(f"{op}: {message}")
        self.op = op


@dataclass(frozen=True)
class Node:
    index: int
    op: str
    parents: tuple[int, ...]
    value: np.ndarray
    backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]] | None


class Tensor:
    __slots__ = ("data", "tape", "index")

    def __init__(self, data, tape: Tape | None = None, index: int = -1):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.index = index

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def numel(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        tag = "param" if self.tape is not None else "const"
        return f"Tensor({tag}, shape={self.shape})"

    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, _wrap(other))


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of primitive applications, in topological order."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.params: list[Tensor] = []

    def param(self, value) -> Tensor:
        t = self._push("param", (), np.array(value, dtype=np.float64), None)
        self.params.append(t)
        return t

    def _push(self, op, parents, value, backward) -> Tensor:
        node = Node(len(self.nodes), op, tuple(parents), value, backward)
        self.nodes.append(node)
        return Tensor(value, self, node.index)

    def __len__(self) -> int:
        return len(self.nodes)


def _record(op: str, inputs: Sequence[Tensor], value: np.ndarray, backward) -> Tensor:
    tapes = {id(t.tape): t.tape for t in inputs if t.tape is not None}
    if not tapes:
        return Tensor(value)
    if len(tapes) > 1:
        raise ValueError(f"{op}: operands recorded on different tapes")
    tape = next(iter(tapes.values()))
    # constants get parent index -1 and never receive gradient
    parents = tuple(t.index if t.tape is tape else -1 for t in inputs)
    return tape._push(op, parents, value, backward)


def backward(tape: Tape, loss: Tensor, wrt: Sequence[Tensor] | None = None) -> list[np.ndarray]:
    """Gradient of a scalar ``loss`` w.r.t. ``wrt`` (default: every parameter on ``tape``)."""
    if loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    wrt = tape.params if wrt is None else wrt
    keep = {t.index for t in wrt if t.tape is tape}
    grads: dict[int, np.ndarray] = {}
    if loss.tape is tape:
        grads[loss.index] = np.ones_like(loss.data)
        for node in reversed(tape.nodes[: loss.index + 1]):
            g = grads.get(node.index) if node.index in keep else grads.pop(node.index, None)
            if g is None or node.backward is None:
                continue
            for parent, pg in zip(node.parents, node.backward(g)):
                if parent < 0 or pg is None:
                    continue
                if parent in grads:
                    grads[parent] = grads[parent] + pg
                else:
                    grads[parent] = pg
    return [grads.get(t.index, np.zeros_like(t.data)) if t.tape is tape else np.zeros_like(t.data) for t in wrt]


def forward_eval(fn: Callable[..., Tensor], inputs: Sequence, params: Sequence) -> tuple[Tensor, Tape, list[Tensor]]:
    """Run ``fn(*params, *inputs)`` on a fresh tape.

    Returns the output, the populated tape and the parameter tensors so the
    caller can run :func:`backward`.
    """
    tape = Tape()
    ps = [tape.param(p) for p in params]
    out = fn(*ps, *[_wrap(x) for x in inputs])
    return out, tape, ps


# primitives


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and a.data.size != 1 and b.data.size != 1:
        raise ShapeError(op, f"shapes {a.shape} and {b.shape} differ")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape) if np.prod(shape) == 1 else g.reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _record("add", (a, b), a.data + b.data,
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _record("sub", (a, b), a.data - b.data,
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    return _record("mul", (a, b), a.data * b.data,
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias: ``x`` is (N, C) or (N, C, H, W), ``b`` is (C,)."""
    if b.data.ndim != 1 or x.data.ndim < 2 or x.shape[1] != b.shape[0]:
        raise ShapeError("add_bias", f"bias {b.shape} does not match input {x.shape}")
    view = (1, -1) + (1,) * (x.data.ndim - 2)
    axes = tuple(i for i in range(x.data.ndim) if i != 1)
    return _record("add_bias", (x, b), x.data + b.data.reshape(view),
                   lambda g: (g, g.sum(axis=axes)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", f"cannot multiply {a.shape} by {b.shape}")
    return _record("matmul", (a, b), a.data @ b.data,
                   lambda g: (g @ b.data.T, a.data.T @ g))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T + b`` with ``w`` stored as (out, in)."""
    if w.data.ndim != 2 or x.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError("linear", f"input {x.shape} incompatible with weight {w.shape}")
    out = _record("linear", (x, w), x.data @ w.data.T,
                  lambda g: (g @ w.data, g.T @ x.data))
    return add_bias(out, b) if b is not None else out


def conv2d(x: Tensor, w: Tensor) -> Tensor:
    """Stride-1 'same' convolution. ``x`` is (N, C, H, W), ``w`` is (O, C, k, k), k odd."""
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1] or w.shape[2] != w.shape[3] or w.shape[2] % 2 == 0:
        raise ShapeError("conv2d", f"input {x.shape} incompatible with kernel {w.shape}")
    k = w.shape[2]
    p = k // 2
    n, c, h, wd = x.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
    cols = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))  # (N, C, H, W, k, k)
    out = np.tensordot(cols, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)

    def back(g):
        dw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
        if x.tape is None:
            return None, dw
        dcols = np.tensordot(g, w.data, axes=([1], [0]))  # (N, H, W, C, k, k)
        dxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + h, j:j + wd] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return dxp[:, :, p:p + h, p:p + wd], dw

    return _record("conv2d", (x, w), out, back)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _record("relu", (x,), np.where(mask, x.data, 0.0), lambda g: (g * mask,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _record("tanh", (x,), y, lambda g: (g * (1.0 - y * y),))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _record("exp", (x,), y, lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(x.data)
    return _record("log", (x,), y, lambda g: (g / x.data,))


def square(x: Tensor) -> Tensor:
    return _record("square", (x,), x.data * x.data, lambda g: (2.0 * g * x.data,))


def abs_(x: Tensor) -> Tensor:
    return _record("abs", (x,), np.abs(x.data), lambda g: (g * np.sign(x.data),))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape
    try:
        y = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError("reshape", str(exc)) from None
    return _record("reshape", (x,), y, lambda g: (g.reshape(old),))


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def sum_(x: Tensor) -> Tensor:
    shape = x.shape
    return _record("sum", (x,), np.sum(x.data), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size
    return _record("mean", (x,), np.mean(x.data), lambda g: (np.broadcast_to(g / n, shape).copy(),))


def avg_pool2(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError("avg_pool2", f"spatial size {(h, w)} not divisible by 2")
    y = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def back(g):
        return (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) / 4.0,)

    return _record("avg_pool2", (x,), y, back)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError("global_avg_pool", f"expected rank-4 input, got {x.shape}")
    n, c, h, w = x.shape
    y = x.data.mean(axis=(2, 3))
    return _record("global_avg_pool", (x,), y,
                   lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),))


def log_softmax(x: Tensor) -> Tensor:
    """Log-softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    y = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    sm = np.exp(y)
    return _record("log_softmax", (x,), y,
                   lambda g: (g - sm * g.sum(axis=-1, keepdims=True),))


def softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    return _record("softmax", (x,), y,
                   lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``logits`` (N, K)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError("cross_entropy", f"logits {logits.shape} vs labels {labels.shape}")
    lp = log_softmax(logits)
    n = labels.shape[0]
    rows = np.arange(n)

    def back(g):
        out = np.zeros(lp.shape)
        out[rows, labels] = -g / n
        return (out,)

    return _record("nll", (lp,), -lp.data[rows, labels].mean(), back)


def hvp(loss_fn: Callable[[Tensor], Tensor], theta, v, step: float | None = None) -> np.ndarray:
    """Central finite-difference Hessian-vector product.

    ``loss_fn`` maps a parameter tensor (recorded on a tape) to a scalar
    loss. The product is ``(g(theta + eps v) - g(theta - eps v)) / (2 eps)``
    where ``g`` is the reverse-mode gradient. The default step is
    ``1e-3 * max(|theta|_inf, 1e-3)``.
    """
    theta = np.asarray(theta, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != theta.shape:
        raise ShapeError("hvp", f"direction {v.shape} does not match parameter {theta.shape}")
    if step is None:
        step = 1e-3 * max(float(np.max(np.abs(theta))) if theta.size else 0.0, 1e-3)
    if not step > 0:
        raise ValueError(f"step must be positive, got {step}")
    if not np.any(v):
        return np.zeros_like(theta)

    def grad_at(point):
        tape = Tape()
        p = tape.param(point)
        (g,) = backward(tape, loss_fn(p))
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient at perturbed point")
        return g

    return (grad_at(theta + step * v) - grad_at(theta - step * v)) / (2.0 * step)


def elementwise_apply(op: str, t) -> np.ndarray:
    """Apply a named search-space unary primitive to a raw array or tensor."""
    from .primitives import apply_unary

    data = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
    return apply_unary(op, data)
