"""Dense tensor kernels for the descriptor network.

Tensors are plain :class:`numpy.ndarray` objects in row-major order with the
batch axis leading: ``(batch, channels, rows, cols)`` for images and
``(batch, features)`` after flattening. Every kernel preserves the input
dtype, so the same code runs in float32 for training and float64 for
gradient checking.
"""

from dataclasses import dataclass

import numpy as np
from numba import njit
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NonFiniteError, ShapeError

L2_EPS = 1e-8

_AXES = {4: ("batch", "channels", "rows", "cols"), 2: ("batch", "features")}


def check_tensor(x, ndim, name="input"):
    x = np.asarray(x)
    if x.ndim != ndim:
        raise ShapeError(f"{name} must have rank {ndim}, got shape {x.shape}")
    for axis, extent in enumerate(x.shape):
        if extent < 1:
            label = _AXES.get(ndim, ())[axis] if ndim in _AXES else axis
            raise ShapeError(f"{name} has empty {label} axis", axis=label)
    return x


def _require(cond, message, axis):
    if not cond:
        raise ShapeError(message, axis=axis)


# -- convolution -------------------------------------------------------------

def im2col(x, kh, kw):
    """Unfold ``x`` into ``(B, C*kh*kw, Ho*Wo)``: one window matrix per sample."""
    B, C, H, W = x.shape
    windows = sliding_window_view(x, (kh, kw), axis=(2, 3))
    cols = np.ascontiguousarray(windows.transpose(0, 1, 4, 5, 2, 3))
    return cols.reshape(B, C * kh * kw, -1)


@njit(cache=True)
def _col2im(dcols, H, W):
    # (B, C, kh, kw, Ho, Wo) -> (B, C, H, W), summing overlapping windows
    B, C, kh, kw, Ho, Wo = dcols.shape
    out = np.zeros((B, C, H, W), dtype=dcols.dtype)
    for b in range(B):
        for c in range(C):
            for i in range(kh):
                for j in range(kw):
                    for y in range(Ho):
                        for x in range(Wo):
                            out[b, c, y + i, x + j] += dcols[b, c, i, j, y, x]
    return out


def _check_conv(x, weight, bias=None):
    x = check_tensor(x, 4, "input")
    weight = check_tensor(weight, 4, "weight")
    _require(x.shape[1] == weight.shape[1],
             f"input has {x.shape[1]} channels but weight expects {weight.shape[1]}",
             "channels")
    _require(x.shape[2] >= weight.shape[2],
             f"input rows {x.shape[2]} smaller than kernel rows {weight.shape[2]}",
             "rows")
    _require(x.shape[3] >= weight.shape[3],
             f"input cols {x.shape[3]} smaller than kernel cols {weight.shape[3]}",
             "cols")
    if bias is not None:
        bias = np.asarray(bias)
        _require(bias.shape == (weight.shape[0],),
                 f"bias shape {bias.shape} does not match {weight.shape[0]} output channels",
                 "channels")
    return x, weight, bias


def conv2d_forward(x, weight, bias, return_cols=False):
    """Valid, stride-1 cross-correlation.

    ``out[b, o, y, x] = bias[o] + sum_{c,i,j} x[b, c, y+i, x+j] * weight[o, c, i, j]``

    With ``return_cols`` the unfolded input is returned as well so that
    :func:`conv2d_backward` can reuse it.
    """
    x, weight, bias = _check_conv(x, weight, bias)
    B, C, H, W = x.shape
    O, _, kh, kw = weight.shape
    Ho, Wo = H - kh + 1, W - kw + 1
    cols = im2col(x, kh, kw)
    # Stacked matmul issues one fixed-shape GEMM per sample, so each sample's
    # result does not depend on what else is in the batch.
    out = np.matmul(weight.reshape(O, -1), cols)
    out += bias.astype(out.dtype, copy=False)[:, None]
    out = out.reshape(B, O, Ho, Wo)
    if return_cols:
        return out, cols
    return out


def conv2d_backward(x, weight, upstream, cols=None, need_input_grad=True):
    """Gradients of :func:`conv2d_forward` w.r.t. input, weight and bias.

    ``grad_input`` is ``None`` when ``need_input_grad`` is false (first layer).
    """
    x, weight, _ = _check_conv(x, weight)
    upstream = check_tensor(upstream, 4, "upstream_grad")
    B, C, H, W = x.shape
    O, _, kh, kw = weight.shape
    Ho, Wo = H - kh + 1, W - kw + 1
    _require(upstream.shape == (B, O, Ho, Wo),
             f"upstream_grad shape {upstream.shape} != expected {(B, O, Ho, Wo)}",
             "upstream")
    if cols is None:
        cols = im2col(x, kh, kw)
    g = upstream.reshape(B, O, -1)
    grad_weight = np.matmul(g, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
    grad_bias = g.sum(axis=(0, 2))
    grad_input = None
    if need_input_grad:
        dcols = np.matmul(weight.reshape(O, -1).T, g).reshape(B, C, kh, kw, Ho, Wo)
        grad_input = _col2im(dcols, H, W)
    return grad_input, grad_weight, grad_bias


# -- tanh ----------------------------------------------------------------------

def tanh_forward(x):
    return np.tanh(x)


def tanh_backward(y_out, upstream):
    """Uses the forward output: d tanh(x)/dx = 1 - tanh(x)**2."""
    return upstream * (1 - y_out * y_out)


# -- 2x2 max pooling -----------------------------------------------------------

@njit(cache=True)
def _pool2(x):
    B, C, H, W = x.shape
    out = np.empty((B, C, H // 2, W // 2), dtype=x.dtype)
    arg = np.empty((B, C, H // 2, W // 2), dtype=np.int8)
    for b in range(B):
        for c in range(C):
            for y in range(H // 2):
                for z in range(W // 2):
                    top, k_top = x[b, c, 2 * y, 2 * z], 0
                    v = x[b, c, 2 * y, 2 * z + 1]
                    if v > top:
                        top, k_top = v, 1
                    bottom, k_bottom = x[b, c, 2 * y + 1, 2 * z], 2
                    v = x[b, c, 2 * y + 1, 2 * z + 1]
                    if v > bottom:
                        bottom, k_bottom = v, 3
                    if bottom > top:
                        out[b, c, y, z], arg[b, c, y, z] = bottom, k_bottom
                    else:
                        out[b, c, y, z], arg[b, c, y, z] = top, k_top
    return out, arg


@njit(cache=True)
def _unpool2(arg, upstream):
    B, C, h, w = upstream.shape
    out = np.zeros((B, C, 2 * h, 2 * w), dtype=upstream.dtype)
    for b in range(B):
        for c in range(C):
            for y in range(h):
                for z in range(w):
                    k = arg[b, c, y, z]
                    out[b, c, 2 * y + k // 2, 2 * z + k % 2] = upstream[b, c, y, z]
    return out


def maxpool2_forward(x):
    """2x2 max pooling with stride 2.

    Returns ``(pooled, argmax)`` where ``argmax`` holds the winning window
    position as ``0..3`` in row-major window order. Ties go to the lowest
    position.
    """
    x = check_tensor(x, 4, "input")
    B, C, H, W = x.shape
    _require(H % 2 == 0, f"max pooling needs even rows, got {H}", "rows")
    _require(W % 2 == 0, f"max pooling needs even cols, got {W}", "cols")
    return _pool2(x)


def maxpool2_backward(argmax, upstream):
    argmax = check_tensor(argmax, 4, "argmax")
    upstream = check_tensor(upstream, 4, "upstream")
    _require(argmax.shape == upstream.shape,
             f"argmax map {argmax.shape} does not match upstream {upstream.shape}",
             "upstream")
    if argmax.min() < 0 or argmax.max() > 3:
        raise ShapeError("argmax map holds positions outside a 2x2 window", axis="argmax")
    return _unpool2(argmax.astype(np.int8, copy=False), upstream)


# -- fully connected -----------------------------------------------------------

def _check_linear(x, weight):
    x = check_tensor(x, 2, "input")
    weight = check_tensor(weight, 2, "weight")
    _require(x.shape[1] == weight.shape[1],
             f"input has {x.shape[1]} features but weight expects {weight.shape[1]}",
             "features")
    return x, weight


def linear_forward(x, weight, bias):
    x, weight = _check_linear(x, weight)
    bias = np.asarray(bias)
    _require(bias.shape == (weight.shape[0],),
             f"bias shape {bias.shape} does not match {weight.shape[0]} outputs",
             "features")
    if x.shape[0] == 1:
        # A single row would dispatch to GEMV, whose summation order differs
        # from GEMM; pad so results do not depend on batch size.
        out = (np.concatenate([x, x]) @ weight.T)[:1]
    else:
        out = x @ weight.T
    out += bias.astype(out.dtype, copy=False)
    return out


def linear_backward(x, weight, upstream):
    """Returns ``(grad_input, grad_weight, grad_bias)``."""
    x, weight = _check_linear(x, weight)
    upstream = check_tensor(upstream, 2, "upstream")
    _require(upstream.shape == (x.shape[0], weight.shape[0]),
             f"upstream shape {upstream.shape} != {(x.shape[0], weight.shape[0])}",
             "upstream")
    return upstream @ weight, upstream.T @ x, upstream.sum(axis=0)


# -- L2 distance ---------------------------------------------------------------

def l2_distance(a, b):
    """Euclidean distance along the last axis (batched over leading axes)."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"cannot compare shapes {a.shape} and {b.shape}", axis="features")
    diff = a - b
    return np.sqrt(np.sum(diff * diff, axis=-1))


def l2_distance_backward(a, b, upstream, dist=None, eps=L2_EPS):
    """Gradients of ``upstream * ||a - b||`` w.r.t. ``a`` and ``b``.

    The denominator is clamped at ``eps`` so coincident vectors get a zero
    gradient instead of NaN.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"cannot compare shapes {a.shape} and {b.shape}", axis="features")
    if dist is None:
        dist = l2_distance(a, b)
    scale = np.asarray(upstream) / np.maximum(dist, eps)
    grad_a = (a - b) * np.expand_dims(scale, -1).astype(a.dtype, copy=False)
    return grad_a, -grad_a


# -- finite-difference checking ------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    checked: int
    skipped: int

    def __float__(self):
        return self.max_rel_error


_STENCILS = {
    2: ((-1, -0.5), (1, 0.5)),
    4: ((-2, 1 / 12), (-1, -8 / 12), (1, 8 / 12), (2, -1 / 12)),
}


def grad_check(f, at, step=1e-3, *, grad, coords=None, kink=None, floor=1e-8, order=2):
    """Compare an analytic gradient with central finite differences.

    ``f`` maps an array shaped like ``at`` to a scalar; ``grad`` is the
    analytic gradient at ``at``. Evaluation happens in float64. ``coords``
    restricts the check to a subset of flat indices. When ``kink`` is given
    it must return a signature of the non-smooth branch taken at a point
    (max-pool winners, min selection, hinge activity); coordinates whose
    stencil crosses a branch change are skipped.

    The per-coordinate error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if order not in _STENCILS:
        raise ValueError(f"order must be one of {sorted(_STENCILS)}")
    x0 = np.array(at, dtype=np.float64)
    analytic = np.asarray(grad, dtype=np.float64).reshape(-1)
    if analytic.size != x0.size:
        raise ShapeError(f"gradient size {analytic.size} != point size {x0.size}")
    if not np.all(np.isfinite(analytic)) or not np.all(np.isfinite(x0)):
        raise NonFiniteError("non-finite point or analytic gradient")
    flat = x0.reshape(-1)
    indices = range(flat.size) if coords is None else coords
    base_sig = None if kink is None else np.asarray(kink(x0))

    worst = 0.0
    checked = skipped = 0
    for k in indices:
        est = 0.0
        crossed = False
        for offset, weight in _STENCILS[order]:
            x = flat.copy()
            x[k] += offset * step
            x = x.reshape(x0.shape)
            if base_sig is not None and not np.array_equal(np.asarray(kink(x)), base_sig):
                crossed = True
                break
            value = float(f(x))
            if not np.isfinite(value):
                raise NonFiniteError(f"f returned {value} at coordinate {k}")
            est += weight * value
        if crossed:
            skipped += 1
            continue
        est /= step
        a = analytic[k]
        err = abs(a - est) / max(abs(a), abs(est), floor)
        worst = max(worst, err)
        checked += 1
    return GradCheckReport(worst, checked, skipped)
