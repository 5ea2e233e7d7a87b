"""Dense tensor kernel: forward ops, hand-written backward passes, gradient checker.

Tensors are plain numpy arrays (row-major, float64 by default so the
finite-difference gate is meaningful). Every op comes as a forward
function plus an explicit ``*_backward`` companion; the model code
composes them by hand over its fixed DAG.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, NumericError, ValidationError


@dataclass
class Parameter:
    """A trainable array paired with its gradient accumulator."""

    value: np.ndarray
    grad: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        elif self.grad.shape != self.value.shape:
            raise DimensionError(
                f"grad shape {self.grad.shape} != value shape {self.value.shape}"
            )

    def zero_grad(self):
        self.grad.fill(0.0)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    return a @ b


def matmul_backward(a, b, dz):
    """Gradients of z = a @ b: dA = dZ Bᵀ, dB = Aᵀ dZ."""
    return dz @ b.T, a.T @ dz


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction for stability."""
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows_backward(y, dy):
    # dx_j = y_j * (dy_j - sum_k dy_k y_k), per row
    return y * (dy - np.sum(dy * y, axis=-1, keepdims=True))


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x, dz):
    # subgradient 0 at exactly 0
    return dz * (x > 0)


def concat_last(xs: list[np.ndarray]) -> np.ndarray:
    if not xs:
        raise ValidationError("concat_last: empty input list")
    lead = xs[0].shape[:-1]
    for x in xs[1:]:
        if x.shape[:-1] != lead:
            raise DimensionError(
                f"concat_last: leading dims differ, {x.shape} vs {xs[0].shape}"
            )
    return np.concatenate(xs, axis=-1)


def concat_last_backward(widths: list[int], dz: np.ndarray) -> list[np.ndarray]:
    """Split the upstream gradient back into the original last-dim extents."""
    if sum(widths) != dz.shape[-1]:
        raise DimensionError(f"split widths {widths} != last dim {dz.shape[-1]}")
    return np.split(dz, np.cumsum(widths)[:-1], axis=-1)


def dropout(x, p, mode, rng, training=True):
    """Inverted dropout. Returns (output, mask); mask is the kept/scale factor.

    mode "elementwise" drops single entries; "channelwise" drops whole
    columns of a 2-D (cells x channels) matrix, i.e. one channel across
    all spatial-temporal cells jointly.
    """
    if not 0.0 <= p < 1.0:
        raise ValidationError(f"dropout probability {p} outside [0, 1)")
    if not training or p == 0.0:
        return x, np.ones_like(x)
    if mode == "elementwise":
        keep = rng.random(x.shape) >= p
    elif mode == "channelwise":
        if x.ndim != 2:
            raise DimensionError("channelwise dropout expects a 2-D matrix")
        keep = np.broadcast_to(rng.random((1, x.shape[1])) >= p, x.shape)
    else:
        raise ValidationError(f"unknown dropout mode {mode!r}")
    mask = keep / (1.0 - p)
    return x * mask, mask


def dropout_backward(mask, dz):
    return dz * mask


def grad_check(loss_and_grads, params: list[Parameter], eps: float = 1e-5) -> float:
    """Max relative error between analytic gradients and central differences.

    ``loss_and_grads()`` must evaluate the scalar loss at the current
    parameter values and leave analytic gradients in each param's
    ``.grad`` (overwriting, not accumulating on top of stale values).
    Relative error is |analytic - numeric| / max(1, |analytic|).
    """
    for p in params:
        p.zero_grad()
    loss = float(loss_and_grads())
    if not np.isfinite(loss):
        raise NumericError(f"non-finite loss {loss} in gradient check")
    analytic = [p.grad.copy() for p in params]

    worst = 0.0
    for p, g in zip(params, analytic):
        flat = p.value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            lp = float(loss_and_grads())
            flat[i] = orig - eps
            lm = float(loss_and_grads())
            flat[i] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise NumericError("non-finite loss during finite differencing")
            numeric = (lp - lm) / (2.0 * eps)
            a = g.reshape(-1)[i]
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    # restore analytic grads for the caller
    for p in params:
        p.zero_grad()
    loss_and_grads()
    return worst
