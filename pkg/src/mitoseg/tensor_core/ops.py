"""Differentiable operations on BCHW arrays.

Each forward op has a matching ``*_backward`` that maps the gradient of a
scalar loss w.r.t. the op's output to gradients w.r.t. its inputs. Ops never
mutate their inputs and keep the input dtype (float32 in the model, float64
in gradient checks).
"""

from __future__ import annotations

import numpy as np

from . import _kernels
from .tensor import AdamState, ShapeError

# im2col scratch above this many bytes falls back to the row kernel
_IM2COL_LIMIT = 96 * 2**20


def _check_conv_shapes(x: np.ndarray, w: np.ndarray, b: np.ndarray | None) -> None:
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be 4-D (batch, channels, height, width), got {x.ndim}-D")
    if w.ndim != 4:
        raise ShapeError(f"conv2d weight must be 4-D (out, in, kh, kw), got {w.ndim}-D")
    if w.shape[1] != x.shape[1]:
        raise ShapeError(f"conv2d channel axis mismatch: weight expects {w.shape[1]} input channels, input has {x.shape[1]}")
    if w.shape[2] != w.shape[3]:
        raise ShapeError(f"conv2d kernel must be square, got {w.shape[2]}x{w.shape[3]}")
    if w.shape[2] not in (1, 3):
        raise ShapeError(f"conv2d kernel size must be 1 or 3, got {w.shape[2]}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d bias axis mismatch: expected length {w.shape[0]}, got shape {b.shape}")


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return np.ascontiguousarray(x)
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=x.dtype)
    out[:, :, p:p + h, p:p + w] = x
    return out


def _im2col(xp: np.ndarray, k: int, out_h: int, out_w: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((c, k, k, n, out_h, out_w), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, :, i:i + out_h, j:j + out_w].transpose(1, 0, 2, 3)
    return cols.reshape(c * k * k, n * out_h * out_w)


def _scratch_ok(n_in: int, k: int, n: int, out_h: int, out_w: int, itemsize: int) -> bool:
    return n_in * k * k * n * out_h * out_w * itemsize <= _IM2COL_LIMIT


# Thin layers are memory bound and the row kernel wins; im2col + GEMM pays off
# once enough channels share each unfolded column (thresholds measured on CPU).
def _blas_forward(n_in, n_out, k, n, out_h, out_w, itemsize) -> bool:
    return n_out >= 64 and _scratch_ok(n_in, k, n, out_h, out_w, itemsize)


def _blas_weight_grad(n_in, n_out, k, n, out_h, out_w, itemsize) -> bool:
    return n_in * n_out >= 1024 and _scratch_ok(n_in, k, n, out_h, out_w, itemsize)


def _correlate(xp: np.ndarray, w: np.ndarray, b: np.ndarray, method: str = "auto") -> np.ndarray:
    n, c, hp, wp = xp.shape
    o, _, k, _ = w.shape
    out_h, out_w = hp - k + 1, wp - k + 1
    if method == "auto":
        use = k == 1 or _blas_forward(c, o, k, n, out_h, out_w, xp.dtype.itemsize)
        method = "blas" if use else "kernel"
    if method == "blas":
        if k == 1:
            out = np.tensordot(w[:, :, 0, 0], xp, axes=(1, 1))
        else:
            cols = _im2col(xp, k, out_h, out_w)
            out = (w.reshape(o, -1) @ cols).reshape(o, n, out_h, out_w)
        out += b[:, None, None, None]
        return np.ascontiguousarray(out.transpose(1, 0, 2, 3))
    out = np.empty((n, o, out_h, out_w), dtype=xp.dtype)
    return _kernels.conv_forward(xp, np.ascontiguousarray(w), np.ascontiguousarray(b), out)


def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None, padding: int = 0,
           method: str = "auto") -> np.ndarray:
    """Stride-1 cross-correlation with zero padding.

    ``method`` selects the implementation ("auto", "kernel", "blas"); all
    agree with a direct loop to float rounding.
    """
    _check_conv_shapes(x, w, b)
    if padding < 0:
        raise ValueError(f"padding must be >= 0, got {padding}")
    w = w.astype(x.dtype, copy=False)
    b = np.zeros(w.shape[0], x.dtype) if b is None else b.astype(x.dtype, copy=False)
    xp = _pad(x, padding)
    if xp.shape[2] < w.shape[2] or xp.shape[3] < w.shape[3]:
        raise ShapeError(f"conv2d spatial axes {x.shape[2:]} too small for kernel {w.shape[2]} with padding {padding}")
    return _correlate(xp, w, b, method)


def conv2d_backward(grad_out: np.ndarray, x: np.ndarray, w: np.ndarray, padding: int = 0,
                    method: str = "auto") -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(grad_input, grad_weight, grad_bias)`` for :func:`conv2d`."""
    _check_conv_shapes(x, w, None)
    k = w.shape[2]
    n, c, h, wd = x.shape
    out_h, out_w = h + 2 * padding - k + 1, wd + 2 * padding - k + 1
    expected = (n, w.shape[0], out_h, out_w)
    if grad_out.shape != expected:
        raise ShapeError(f"conv2d_backward grad_out shape {grad_out.shape} != forward output shape {expected}")
    dtype = x.dtype
    w = w.astype(dtype, copy=False)
    g = np.ascontiguousarray(grad_out, dtype=dtype)
    xp = _pad(x, padding)

    grad_bias = g.sum(axis=(0, 2, 3), dtype=np.float64).astype(dtype)

    use_blas = k == 1 or method == "blas" or (
        method == "auto" and _blas_weight_grad(c, w.shape[0], k, n, out_h, out_w, xp.dtype.itemsize))
    if use_blas:
        if k == 1:
            gw = np.tensordot(g, xp, axes=((0, 2, 3), (0, 2, 3)))[:, :, None, None]
        else:
            cols = _im2col(xp, k, out_h, out_w)
            g2 = g.transpose(1, 0, 2, 3).reshape(w.shape[0], -1)
            gw = (g2 @ cols.T).reshape(w.shape)
        grad_weight = gw.astype(dtype)
    else:
        acc = np.zeros(w.shape, dtype=np.float64)
        _kernels.conv_grad_weight(xp, g, acc)
        grad_weight = acc.astype(dtype)

    # input gradient: full correlation of grad_out with the flipped, transposed kernel
    w_t = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    gxp = _correlate(_pad(g, k - 1), w_t, np.zeros(c, dtype), method)
    grad_input = gxp[:, :, padding:padding + h, padding:padding + wd]
    return np.ascontiguousarray(grad_input), grad_weight, grad_bias


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    return grad_out * (x > 0)


def maxpool2x2(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """2x2/stride-2 max pooling.

    Returns the pooled array and, per output element, the index (0..3, row-major
    within the window) of the winning input. Ties go to the first in scan order.
    """
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2 needs even height and width, got {h}x{w}")
    out = np.empty((n, c, h // 2, w // 2), dtype=x.dtype)
    idx = np.empty((n, c, h // 2, w // 2), dtype=np.int8)
    _kernels.maxpool2x2(np.ascontiguousarray(x), out, idx)
    return out, idx


def maxpool2x2_backward(grad_out: np.ndarray, argmax: np.ndarray) -> np.ndarray:
    n, c, h2, w2 = grad_out.shape
    if argmax.shape != grad_out.shape:
        raise ShapeError(f"maxpool2x2_backward argmax shape {argmax.shape} != grad shape {grad_out.shape}")
    out = np.zeros((n, c, 2 * h2, 2 * w2), dtype=grad_out.dtype)
    return _kernels.maxpool2x2_scatter(np.ascontiguousarray(grad_out), np.ascontiguousarray(argmax), out)


def bilinear_upsample2x(x: np.ndarray) -> np.ndarray:
    """Parameter-free 2x bilinear upsampling (half-pixel centers, clamped edges)."""
    if x.ndim != 4:
        raise ShapeError(f"bilinear_upsample2x needs a 4-D input, got {x.ndim}-D")
    x = np.ascontiguousarray(x)
    n, c, h, w = x.shape
    return _kernels.upsample2x(x, np.empty((n, c, 2 * h, 2 * w), dtype=x.dtype))


def bilinear_upsample2x_backward(grad_out: np.ndarray) -> np.ndarray:
    if grad_out.shape[2] % 2 or grad_out.shape[3] % 2:
        raise ShapeError(f"upsample gradient must have even spatial extents, got {grad_out.shape[2:]}")
    g = np.ascontiguousarray(grad_out)
    n, c, h2, w2 = g.shape
    return _kernels.upsample2x_transpose(g, np.empty((n, c, h2 // 2, w2 // 2), dtype=g.dtype))


def dropout(x: np.ndarray, rate: float, training: bool, rng: np.random.Generator | None = None
            ) -> tuple[np.ndarray, np.ndarray | None]:
    """Inverted dropout. Returns ``(output, scaled_mask)``; the mask is None when inactive."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0:
        return x, None
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = rng.random(x.shape, dtype=np.float32) >= rate
    mask = keep.astype(x.dtype) * x.dtype.type(1.0 / (1.0 - rate))
    return x * mask, mask


def dropout_backward(grad_out: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    return grad_out if mask is None else grad_out * mask


def sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype, copy=False)


def sigmoid_bce_loss(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy on logits; returns ``(loss, dloss/dlogits)``."""
    if logits.shape != targets.shape:
        raise ShapeError(f"logits shape {logits.shape} != targets shape {targets.shape}")
    if not np.all((targets == 0) | (targets == 1)):
        raise ValueError("targets must contain only 0 and 1")
    t = targets.astype(logits.dtype, copy=False)
    x64 = logits.astype(np.float64)
    per = np.maximum(x64, 0) - x64 * t + np.log1p(np.exp(-np.abs(x64)))
    loss = float(per.mean())
    grad = (sigmoid(logits) - t) / logits.dtype.type(logits.size)
    return loss, grad.astype(logits.dtype, copy=False)


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState) -> tuple[np.ndarray, AdamState]:
    """Bias-corrected Adam update. Inputs are left untouched."""
    if param.shape != grad.shape or state.m.shape != param.shape:
        raise ShapeError(f"adam_step shapes differ: param {param.shape}, grad {grad.shape}, moments {state.m.shape}")
    step = state.step + 1
    m = state.beta1 * state.m + (1 - state.beta1) * grad
    v = state.beta2 * state.v + (1 - state.beta2) * grad * grad
    m_hat = m / (1 - state.beta1 ** step)
    v_hat = v / (1 - state.beta2 ** step)
    new = param - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    dt = param.dtype
    new_state = AdamState(m.astype(dt), v.astype(dt), step, state.lr, state.beta1, state.beta2, state.eps)
    return new.astype(dt), new_state
