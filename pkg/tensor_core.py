"""
Tensor Core - dense float64 arithmetic shared by every other module
Tensors are plain numpy arrays; this module validates shapes and finiteness
and provides the handful of operations the attack family is built from
"""

from typing import Optional, Sequence

import numpy as np

Tensor = np.ndarray

DTYPE = np.float64


class LabError(Exception):
    """Base class for every error raised by the lab"""


class TensorError(LabError):
    """Shape mismatch, invalid domain (sqrt/div) or non-finite data"""


def as_tensor(data, shape: Optional[Sequence[int]] = None) -> Tensor:
    """Build a float64 tensor, optionally reshaped to `shape`"""
    t = np.array(data, dtype=DTYPE)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if any(s <= 0 for s in shape):
            raise TensorError(f"Shape extents must be positive, got {shape}")
        if int(np.prod(shape)) != t.size:
            raise TensorError(f"Cannot view {t.size} elements as shape {shape}")
        t = t.reshape(shape)
    return t


def zeros_like(t: Tensor) -> Tensor:
    return np.zeros(np.shape(t), dtype=DTYPE)


def check_finite(t: Tensor, what: str = "tensor") -> Tensor:
    if not np.all(np.isfinite(t)):
        raise TensorError(f"{what} contains NaN or Inf")
    return t


def _check_same_shape(a: Tensor, b: Tensor, op: str):
    if np.shape(a) != np.shape(b):
        raise TensorError(f"{op}: shape mismatch {np.shape(a)} vs {np.shape(b)}")


def sign(t: Tensor) -> Tensor:
    """Elementwise sign with sign(0) = 0"""
    return np.sign(np.asarray(t, dtype=DTYPE))


def clip_ball(x_adv: Tensor, x_orig: Tensor, eps_ball: float,
              lo: float, hi: float) -> Tensor:
    """
    Project x_adv onto the intersection of the L-inf ball around x_orig and
    the input domain [lo, hi]. Both constraints are intervals, so a single
    clip against the intersected bounds is exact and idempotent.
    """
    _check_same_shape(x_adv, x_orig, "clip_ball")
    if eps_ball < 0:
        raise TensorError(f"clip_ball: eps_ball must be >= 0, got {eps_ball}")
    if lo > hi:
        raise TensorError(f"clip_ball: empty domain [{lo}, {hi}]")
    x_orig = np.asarray(x_orig, dtype=DTYPE)
    lower = np.maximum(lo, x_orig - eps_ball)
    upper = np.minimum(hi, x_orig + eps_ball)
    return np.minimum(np.maximum(np.asarray(x_adv, dtype=DTYPE), lower), upper)


def l1_norm(t: Tensor) -> float:
    return float(np.sum(np.abs(t)))


def l2_norm(t: Tensor) -> float:
    return float(np.sqrt(np.sum(np.square(t))))


def linf_norm(t: Tensor) -> float:
    t = np.asarray(t)
    if t.size == 0:
        return 0.0
    return float(np.max(np.abs(t)))


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    return np.add(a, b, dtype=DTYPE)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    return np.subtract(a, b, dtype=DTYPE)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    return np.multiply(a, b, dtype=DTYPE)


def scale(t: Tensor, c: float) -> Tensor:
    return np.multiply(t, float(c), dtype=DTYPE)


def square(t: Tensor) -> Tensor:
    return np.square(np.asarray(t, dtype=DTYPE))


def sqrt(t: Tensor) -> Tensor:
    t = np.asarray(t, dtype=DTYPE)
    if np.any(t < 0):
        raise TensorError("sqrt of negative element")
    return np.sqrt(t)


def div(a: Tensor, b: Tensor, stabilizer: Optional[float] = None) -> Tensor:
    """a / (b + stabilizer); without a stabilizer any zero in b is an error"""
    _check_same_shape(a, b, "div")
    b = np.asarray(b, dtype=DTYPE)
    if stabilizer is not None:
        b = b + stabilizer
    if np.any(b == 0):
        raise TensorError("div by zero (pass a stabilizer)")
    return np.divide(a, b, dtype=DTYPE)


def l1_normalized(t: Tensor) -> Tensor:
    """t / ||t||_1, or the zero tensor when t is all zeros"""
    norm = l1_norm(t)
    if norm == 0.0:
        return zeros_like(t)
    return np.asarray(t, dtype=DTYPE) / norm
