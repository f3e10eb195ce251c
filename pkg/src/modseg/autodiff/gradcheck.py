"""Central-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from .tensor import Tape, Tensor, backward, precision


def numerical_grad(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-3,
                   coords=None, dtype=np.float64) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x`` for the flat indices ``coords``.

    ``f`` is evaluated under ``precision(dtype)``; by default the oracle runs in
    64-bit regardless of the working precision.
    """
    base = np.array(x.data, dtype=np.float64)
    flat = base.reshape(-1)
    coords = range(flat.size) if coords is None else coords
    out = np.zeros(flat.size)
    with precision(dtype):
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f(Tensor(base)).data)
            flat[i] = orig - eps
            fm = float(f(Tensor(base)).data)
            flat[i] = orig
            out[i] = (fp - fm) / (2 * eps)
    return out.reshape(base.shape)


def analytic_grad(f: Callable[[Tensor], Tensor], x: Tensor) -> np.ndarray:
    t = Tensor(x.data, requires_grad=True)
    with Tape() as tape:
        y = f(t)
    if not y.requires_grad:
        return np.zeros(t.shape)
    backward(y, tape)
    return np.zeros(t.shape) if t.grad is None else np.array(t.grad, dtype=np.float64)


def relative_errors(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-3,
               coords: Optional[np.ndarray] = None, oracle_dtype=np.float64,
               min_scale: float = 0.0) -> float:
    """Max relative error between the tape gradient and central differences.

    The analytic side runs at the current working precision.  ``coords``
    restricts the comparison to a subset of flat indices.  With ``min_scale``
    > 0, coordinates where both gradients are below ``min_scale`` times the
    tensor's largest gradient are skipped: there the relative error measures
    roundoff in the oracle rather than the derivative.
    """
    full = analytic_grad(f, x).reshape(-1)
    n = numerical_grad(f, x, eps, coords, oracle_dtype).reshape(-1)
    a = full
    if coords is not None:
        coords = np.asarray(coords)
        a, n = full[coords], n[coords]
    if min_scale > 0:
        scale = max(np.abs(full).max(initial=0.0), np.abs(n).max(initial=0.0))
        keep = np.maximum(np.abs(a), np.abs(n)) >= min_scale * scale
        a, n = a[keep], n[keep]
    if a.size == 0:
        return 0.0
    return float(relative_errors(a, n).max())


def smooth_coords(f: Callable[[Tensor], Tensor], x: Tensor, coords, eps: float, rtol: float,
                  oracle_dtype=np.float64) -> np.ndarray:
    """The subset of ``coords`` where central differences at ``eps`` and ``eps / 10`` agree.

    A relu or max-pool kink inside the stencil shifts the ``eps`` estimate
    but not the narrower one; such coordinates are not differentiable at the
    resolution of the check.  Only the oracle is consulted, never the tape.
    """
    coords = np.asarray(coords)
    wide = numerical_grad(f, x, eps, coords, oracle_dtype).reshape(-1)[coords]
    narrow = numerical_grad(f, x, eps / 10, coords, oracle_dtype).reshape(-1)[coords]
    return coords[relative_errors(wide, narrow) < rtol]
