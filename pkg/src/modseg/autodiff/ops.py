"""Differentiable primitives.

Feature maps are NCHW.  Convolutions are stride 1; all downsampling goes
through :func:`maxpool2`.
"""

from __future__ import annotations

import numpy as np

from ..errors import ShapeError
from .tensor import Tensor, as_tensor, make_result


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_result(
        "add", a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_result(
        "sub", a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_result(
        "mul", a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result("relu", np.where(mask, x.data, 0), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    y = sigmoid_array(x.data)
    return make_result("sigmoid", y, (x,), lambda g: (g * y * (1 - y),))


def sigmoid_array(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1 / (1 + e), e / (1 + e)).astype(z.dtype, copy=False)


# ---------------------------------------------------------------- reductions / shape

def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return make_result("sum", np.asarray(x.data.sum()), (x,),
                       lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return make_result("mean", np.asarray(x.data.mean()), (x,),
                       lambda g: (np.full(shape, g / n, dtype=x.data.dtype),))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return make_result("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def getitem(x: Tensor, index) -> Tensor:
    def bwd(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)
    return make_result("getitem", x.data[index], (x,), bwd)


def concat(xs, axis: int = 1) -> Tensor:
    xs = tuple(as_tensor(t) for t in xs)
    ref = xs[0].shape
    for t in xs[1:]:
        if t.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != axis):
            raise ShapeError(f"concat: {t.shape} incompatible with {ref} along axis {axis}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in xs])

    def bwd(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))
    return make_result("concat", np.concatenate([t.data for t in xs], axis=axis), xs, bwd)


def global_avg_pool(x: Tensor) -> Tensor:
    """[N,C,H,W] -> [N,C]"""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects NCHW, got {x.shape}")
    n, c, h, w = x.shape
    return make_result(
        "global_avg_pool", x.data.mean(axis=(2, 3)), (x,),
        lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),),
    )


# ---------------------------------------------------------------- dense layers

def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x[N,D] @ w[D,K] + b[K]"""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"linear: x{x.shape} w{w.shape} b{b.shape}")
    return make_result(
        "linear", x.data @ w.data + b.data, (x, w, b),
        lambda g: (g @ w.data.T, x.data.T @ g, g.sum(axis=0)),
    )


def _pad_amount(k: int, padding: str) -> int:
    if padding == "valid":
        return 0
    if padding == "same":
        if k % 2 == 0:
            raise ShapeError(f"'same' padding needs an odd kernel, got {k}")
        return k // 2
    raise ShapeError(f"unknown padding {padding!r}")


def _correlate(xp: np.ndarray, w: np.ndarray):
    """Valid cross-correlation of padded input with w[K,C,kh,kw].

    Returns ``(out, cols)`` where ``cols`` is the [N, kh*kw*C, Ho*Wo] patch
    matrix (tap-major, channel-minor), kept for the weight gradient.
    """
    n, c, hp, wp = xp.shape
    k, _, kh, kw = w.shape
    ho, wo = hp - kh + 1, wp - kw + 1
    if kh == 1 and kw == 1:
        cols = xp.reshape(n, c, ho * wo)
    else:
        cols = np.empty((n, kh * kw, c, ho, wo), dtype=xp.dtype)
        for i in range(kh):
            for j in range(kw):
                cols[:, i * kw + j] = xp[:, :, i:i + ho, j:j + wo]
        cols = cols.reshape(n, kh * kw * c, ho * wo)
    wmat = w.transpose(0, 2, 3, 1).reshape(k, -1)
    out = np.matmul(wmat, cols)
    return out.reshape(n, k, ho, wo), cols


def conv2d(x: Tensor, w: Tensor, b: Tensor, padding: str = "same") -> Tensor:
    """Stride-1 cross-correlation plus per-channel bias."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d x and w, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    k, cw, kh, kw = w.shape
    if cw != c:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {cw}")
    if b.shape != (k,):
        raise ShapeError(f"conv2d: bias shape {b.shape} != ({k},)")
    ph, pw = _pad_amount(kh, padding), _pad_amount(kw, padding)
    if h + 2 * ph < kh or wd + 2 * pw < kw:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} does not fit input {h}x{wd} ({padding})")
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    out, cols = _correlate(xp, w.data)
    out = out + b.data[None, :, None, None]

    def bwd(g):
        gw = gx = None
        if w.requires_grad:
            gmat = g.reshape(n, k, -1)
            gw = np.matmul(gmat, cols.transpose(0, 2, 1)).sum(axis=0)
            gw = gw.reshape(k, kh, kw, c).transpose(0, 3, 1, 2)
        if x.requires_grad:
            qh, qw = kh - 1 - ph, kw - 1 - pw
            gp = np.pad(g, ((0, 0), (0, 0), (qh, qh), (qw, qw))) if (qh or qw) else g
            wflip = np.ascontiguousarray(w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            gx, _ = _correlate(gp, wflip)
        return gx, gw, g.sum(axis=(0, 2, 3))

    return make_result("conv2d", out, (x, w, b), bwd)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 non-overlapping max pool; ties go to the first element in row-major order."""
    if x.ndim != 4:
        raise ShapeError(f"maxpool2 expects NCHW, got {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even H and W, got {h}x{w}")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def bwd(g):
        gw = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gx = gw.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return make_result("maxpool2", out, (x,), bwd)


def interp_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Align-corners linear interpolation weights, shape [n_out, n_in]."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    if n_out == 1 or n_in == 1:
        m[:, 0] = 1.0
        return m
    src = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    lo = np.minimum(np.floor(src).astype(int), n_in - 2)
    frac = src - lo
    rows = np.arange(n_out)
    m[rows, lo] = 1.0 - frac
    m[rows, lo + 1] += frac
    return m


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Align-corners bilinear resampling of the last two axes."""
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"bilinear_resize: output size must be >= 1, got {out_h}x{out_w}")
    if x.ndim < 2:
        raise ShapeError(f"bilinear_resize needs at least 2 dims, got {x.shape}")
    h, w = x.shape[-2:]
    if (h, w) == (out_h, out_w):
        return make_result("bilinear_resize", x.data.copy(), (x,), lambda g: (g,))
    dt = x.data.dtype
    ry = interp_matrix(h, out_h, dt)
    rx = interp_matrix(w, out_w, dt)
    out = ry @ x.data @ rx.T
    return make_result("bilinear_resize", out, (x,), lambda g: (ry.T @ g @ rx,))


def resize_array(a: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Non-differentiable align-corners bilinear resize of the last two axes (float64)."""
    h, w = a.shape[-2:]
    if (h, w) == (out_h, out_w):
        return np.array(a, dtype=np.float64)
    return interp_matrix(h, out_h) @ np.asarray(a, dtype=np.float64) @ interp_matrix(w, out_w).T


# ---------------------------------------------------------------- modulation

def apply_modulation(x: Tensor, gamma: Tensor, beta: Tensor | None = None) -> Tensor:
    """Channel-wise scale then element-wise bias: y[n,c] = gamma[c] * x[n,c] + beta[c].

    ``gamma`` is [C] or [N,C]; ``beta`` is [C,h,w] or [N,C,h,w] (or None).
    """
    if x.ndim != 4:
        raise ShapeError(f"apply_modulation expects NCHW, got {x.shape}")
    n, c, h, w = x.shape
    gamma = as_tensor(gamma)
    if gamma.shape not in ((c,), (n, c)):
        raise ShapeError(f"gamma shape {gamma.shape} does not match x {x.shape}")
    g4 = gamma.data[..., None, None] if gamma.ndim == 2 else gamma.data[None, :, None, None]
    inputs = [x, gamma]
    out = x.data * g4
    if beta is not None:
        beta = as_tensor(beta)
        if beta.shape not in ((c, h, w), (n, c, h, w)):
            raise ShapeError(f"beta shape {beta.shape} does not match x {x.shape}")
        out = out + beta.data
        inputs.append(beta)

    def bwd(grad):
        gx = grad * g4
        gg = (grad * x.data).sum(axis=(2, 3))
        if gamma.ndim == 1:
            gg = gg.sum(axis=0)
        res = [gx, gg]
        if beta is not None:
            res.append(grad if beta.ndim == 4 else grad.sum(axis=0))
        return tuple(res)

    return make_result("apply_modulation", out, tuple(inputs), bwd)
