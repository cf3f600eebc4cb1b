"""Dense 2-D kernels shared by every layer.

Matrices are plain ``numpy.ndarray`` objects. Every kernel accepts optional
leading batch axes and operates on the trailing two, so one call can process
a whole mini-batch of ``D x T`` samples.
"""

import numpy as np

ACTIVATIONS = ("identity", "relu")


class ShapeError(ValueError):
    pass


class NonFiniteError(ValueError):
    pass


def _shape2(a):
    return tuple(a.shape[-2:])


def check_finite(a, name):
    if not np.all(np.isfinite(a)):
        raise NonFiniteError(f"{name} contains non-finite values")


def matmul(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return np.matmul(a, b)


def hadamard(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if _shape2(a) != _shape2(b):
        raise ShapeError(f"elementwise product needs equal shapes, got {a.shape} and {b.shape}")
    return a * b


def transpose(a):
    return np.swapaxes(np.asarray(a), -1, -2)


def row_softmax(e):
    """Softmax across the last axis with row-max subtraction.

    Each row of the result is non-negative and sums to one.
    """
    e = np.asarray(e)
    if np.isnan(e).any():
        raise NonFiniteError("row_softmax got NaN input")
    shifted = e - e.max(axis=-1, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=-1, keepdims=True)


def apply_elementwise(a, fn):
    if fn == "identity":
        return np.array(a, copy=True)
    if fn == "relu":
        return np.maximum(a, 0)
    raise ValueError(f"unknown activation {fn!r}; expected one of {ACTIVATIONS}")


def activation_grad(z, fn, upstream):
    """Chain ``upstream`` through the activation evaluated at pre-activation ``z``."""
    if fn == "identity":
        return upstream
    if fn == "relu":
        return upstream * (z > 0)
    raise ValueError(f"unknown activation {fn!r}; expected one of {ACTIVATIONS}")
