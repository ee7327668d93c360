"""Numeric kernels for the proxy search-space primitives.

Every kernel maps float64 arrays to float64 arrays. Domain violations
(log of a negative value, division by zero, ...) produce non-finite values
instead of raising; callers decide whether to reject. Only structural
problems raise :class:`IncompatibleShapes`.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

EPS = 1e-9


class IncompatibleShapes(ValueError):
    pass


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softmax(x):
    z = x - np.max(x)
    e = np.exp(z)
    return e / np.sum(e)


def _logsoftmax(x):
    z = x - np.max(x)
    return z - np.log(np.sum(np.exp(z)))


def _normalize(x):
    return (x - np.mean(x)) / np.std(x)


def _min_max(x):
    lo = np.min(x)
    return (x - lo) / (np.max(x) - lo)


UNARY: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "no_op": lambda x: x,
    "element_wise_abs": np.abs,
    "element_wise_tanh": np.tanh,
    "element_wise_pow": np.square,
    "element_wise_exp": np.exp,
    "element_wise_log": np.log,
    "element_wise_relu": lambda x: np.maximum(x, 0.0),
    "element_wise_leaky_relu": lambda x: np.maximum(0.1 * x, x),
    "element_wise_swish": lambda x: x * _sigmoid(x),
    "element_wise_mish": lambda x: x * np.tanh(np.logaddexp(0.0, x)),
    "element_wise_invert": lambda x: 1.0 / x,
    "element_wise_normalized_sum": lambda x: np.sum(x) / (x.size + EPS),
    "normalize": _normalize,
    "sigmoid": _sigmoid,
    "logsoftmax": _logsoftmax,
    "softmax": _softmax,
    "element_wise_sqrt": np.sqrt,
    "element_wise_revert": np.negative,
    "frobenius_norm": lambda x: np.sqrt(np.sum(x * x)),
    "element_wise_abslog": lambda x: np.abs(np.log(x)),
    "l1_norm": lambda x: np.sum(np.abs(x)) / (x.size + EPS),
    "min_max_normalize": _min_max,
    "to_mean_scalar": np.mean,
    "to_std_scalar": np.std,
}

# ops whose output is always a scalar, whatever the input rank
AGGREGATING = frozenset({
    "element_wise_normalized_sum",
    "frobenius_norm",
    "l1_norm",
    "to_mean_scalar",
    "to_std_scalar",
})


def apply_unary(op: str, x: np.ndarray) -> np.ndarray:
    try:
        fn = UNARY[op]
    except KeyError:
        raise KeyError(f"unknown unary op {op!r}") from None
    with np.errstate(all="ignore"):
        return np.asarray(fn(np.asarray(x, dtype=np.float64)), dtype=np.float64)


def _pair(op: str, a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # scalars broadcast; everything else must agree in flattened length
    if a.size == 1 or b.size == 1:
        return a, b
    if a.size != b.size:
        raise IncompatibleShapes(f"{op}: {a.shape} vs {b.shape}")
    return a, b.reshape(a.shape)


def _as_matrix(x: np.ndarray) -> np.ndarray:
    return x.reshape(x.shape[0], -1) if x.ndim > 2 else x


def _matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.size == 1 or b.size == 1:
        return a * b
    a, b = _as_matrix(a), _as_matrix(b)
    if a.ndim == 1 and b.ndim == 1:
        if a.size != b.size:
            raise IncompatibleShapes(f"matrix_multiplication: {a.shape} vs {b.shape}")
        return np.asarray(a @ b)
    inner_a = a.shape[-1]
    inner_b = b.shape[0]
    if inner_a != inner_b:
        raise IncompatibleShapes(f"matrix_multiplication: {a.shape} vs {b.shape}")
    return a @ b


BINARY: dict[str, Callable[[np.ndarray, np.ndarray], np.ndarray]] = {
    "element_wise_sum": lambda a, b: np.add(*_pair("element_wise_sum", a, b)),
    "element_wise_difference": lambda a, b: np.subtract(*_pair("element_wise_difference", a, b)),
    "element_wise_product": lambda a, b: np.multiply(*_pair("element_wise_product", a, b)),
    "matrix_multiplication": _matmul,
}

COMMUTATIVE = frozenset({"element_wise_sum", "element_wise_product"})


def apply_binary(op: str, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    try:
        fn = BINARY[op]
    except KeyError:
        raise KeyError(f"unknown binary op {op!r}") from None
    with np.errstate(all="ignore"):
        return np.asarray(fn(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)))
