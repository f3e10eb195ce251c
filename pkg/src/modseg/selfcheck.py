"""Gradient verification suite behind ``modseg gradcheck``."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, grad_check, precision, smooth_coords
from .modnet import ModConfig, init_model, modulated_forward
from .training import balanced_ce


@dataclass
class CheckResult:
    name: str
    error: float
    tol: float
    checked: int = 1  # coordinates compared

    @property
    def passed(self) -> bool:
        return bool(self.checked > 0 and np.isfinite(self.error) and self.error < self.tol)


TINY = ModConfig(stage_channels=(4, 4, 6, 6), stage_sizes=(2, 2), skip_first=1, guide_resolution=8,
                 fusion_channels=3, input_sizes=(8,), visual_channels=(3, 3, 4, 4))


def _spaced(rng, shape, step=0.05):
    """Distinct values at least ``step`` apart (keeps max-pool argmax stable under perturbation)."""
    n = int(np.prod(shape))
    return (rng.permutation(n) - n / 2).reshape(shape) * step


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.uniform(margin, 1.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _weighted(op: Callable, weights: np.ndarray) -> Callable:
    w = Tensor(weights)
    return lambda *xs: ad.tsum(ad.mul(op(*xs), w))


def op_cases(rng: np.random.Generator) -> list:
    """(name, f, x) triples where f maps the checked tensor to a scalar."""
    cases = []
    x = rng.standard_normal((2, 3, 6, 5))
    w = rng.standard_normal((4, 3, 3, 3)) * 0.5
    b = rng.standard_normal(4)
    r = rng.standard_normal((2, 4, 6, 5))
    conv = _weighted(lambda xx, ww, bb: ad.conv2d(xx, ww, bb), r)
    cases += [
        ("conv2d/x", lambda t: conv(t, Tensor(w), Tensor(b)), x),
        ("conv2d/w", lambda t: conv(Tensor(x), t, Tensor(b)), w),
        ("conv2d/b", lambda t: conv(Tensor(x), Tensor(w), t), b),
    ]
    rv = rng.standard_normal((2, 4, 4, 3))
    convv = _weighted(lambda xx, ww: ad.conv2d(xx, ww, Tensor(b), padding="valid"), rv)
    cases += [("conv2d_valid/x", lambda t: convv(t, Tensor(w)), x),
              ("conv2d_valid/w", lambda t: convv(Tensor(x), t), w)]

    xp = _spaced(rng, (2, 3, 4, 6))
    cases.append(("maxpool2", _weighted(ad.maxpool2, rng.standard_normal((2, 3, 2, 3))), xp))
    xr = _away_from_zero(rng, (3, 7))
    cases.append(("relu", _weighted(ad.relu, rng.standard_normal((3, 7))), xr))
    cases.append(("sigmoid", _weighted(ad.sigmoid, rng.standard_normal((3, 7))), rng.standard_normal((3, 7))))

    xl, wl, bl = rng.standard_normal((3, 5)), rng.standard_normal((5, 4)), rng.standard_normal(4)
    lin = _weighted(ad.linear, rng.standard_normal((3, 4)))
    cases += [("linear/x", lambda t: lin(t, Tensor(wl), Tensor(bl)), xl),
              ("linear/w", lambda t: lin(Tensor(xl), t, Tensor(bl)), wl),
              ("linear/b", lambda t: lin(Tensor(xl), Tensor(wl), t), bl)]

    cases.append(("bilinear_resize", _weighted(lambda t: ad.bilinear_resize(t, 7, 4), rng.standard_normal((1, 2, 7, 4))),
                  rng.standard_normal((1, 2, 5, 7))))

    xm, gm, bm = rng.standard_normal((2, 3, 4, 4)), rng.standard_normal(3), rng.standard_normal((3, 4, 4))
    gn, bn = rng.standard_normal((2, 3)), rng.standard_normal((2, 3, 4, 4))
    mod = _weighted(ad.apply_modulation, rng.standard_normal((2, 3, 4, 4)))
    cases += [("apply_modulation/x", lambda t: mod(t, Tensor(gm), Tensor(bm)), xm),
              ("apply_modulation/gamma", lambda t: mod(Tensor(xm), t, Tensor(bm)), gm),
              ("apply_modulation/beta", lambda t: mod(Tensor(xm), Tensor(gm), t), bm),
              ("apply_modulation/gamma_batched", lambda t: mod(Tensor(xm), t, Tensor(bn)), gn),
              ("apply_modulation/beta_batched", lambda t: mod(Tensor(xm), Tensor(gn), t), bn)]

    cases.append(("global_avg_pool", _weighted(ad.global_avg_pool, rng.standard_normal((2, 3))),
                  rng.standard_normal((2, 3, 4, 5))))
    other = rng.standard_normal((2, 2, 3))
    cases.append(("concat", _weighted(lambda t: ad.concat([t, Tensor(other)], axis=1), rng.standard_normal((2, 5, 3))),
                  rng.standard_normal((2, 3, 3))))
    cases.append(("getitem", _weighted(lambda t: t[:, 1:3], rng.standard_normal((2, 2))), rng.standard_normal((2, 4))))
    y = rng.standard_normal((3, 4))
    cases.append(("mul", lambda t: ad.tsum(ad.mul(ad.mul(t, Tensor(y)), t)), rng.standard_normal((3, 4))))
    cases.append(("add_broadcast", _weighted(lambda t: ad.add(Tensor(y), t), rng.standard_normal((3, 4))),
                  rng.standard_normal(4)))
    cases.append(("sub", _weighted(lambda t: ad.sub(Tensor(y), t), rng.standard_normal((3, 4))), rng.standard_normal((3, 4))))
    tgt = rng.uniform(size=(2, 5, 6)) > 0.6
    cases.append(("balanced_ce", lambda t: balanced_ce(t, tgt), rng.standard_normal((2, 1, 5, 6)) * 2))
    return cases


def end_to_end_cases(rng: np.random.Generator, per_tensor: int = 6) -> list:
    """Loss of the full modulated model wrt sampled coordinates of all three networks.

    Returns (name, f, x, coords).  The visual modulator's last layer is
    randomized so that gradients reach the visual trunk, and conv biases are
    moved off zero: a pixel whose receptive field is all relu-zeros would
    otherwise sit exactly on the relu kink.
    """
    model = init_model(TINY, seed=int(rng.integers(1 << 31)))
    model.params["visual.fc.w"].data[...] = rng.standard_normal(model.params["visual.fc.w"].shape) * 0.5
    for name, p in model.params.items():
        if name.endswith(".b") and name.startswith(("segnet.conv", "visual.conv")):
            p.data[...] = rng.uniform(0.05, 0.2, size=p.shape) * rng.choice([-1.0, 1.0], size=p.shape)
    image = rng.standard_normal((2, 3, 8, 8))
    guide = rng.standard_normal((2, 3, 8, 8))
    heat = rng.uniform(size=(2, 8, 8))
    target = rng.uniform(size=(2, 8, 8)) > 0.5
    names = ["segnet.conv0.w", "segnet.conv2.w", "segnet.conv3.b", "segnet.side1.w", "segnet.fuse.w",
             "visual.conv1.w", "visual.conv3.b", "visual.fc.w", "visual.fc.b",
             "spatial.layer0.w", "spatial.layer2.b"]
    cases = []
    for name in names:
        p = model.params[name]

        def f(t, name=name):
            saved = model.params[name]
            model.params[name] = t
            try:
                return balanced_ce(modulated_forward(model, image, guide, heat), target)
            finally:
                model.params[name] = saved
        coords = rng.choice(p.size, size=min(per_tensor, p.size), replace=False)
        cases.append((f"end_to_end/{name}", f, p.data.copy(), coords))
    return cases


MIN_SCALE = 1e-3  # skip coordinates whose gradient is negligible next to the tensor's largest


def run_gradcheck(dtype=np.float32, seed: int = 0, e2e_eps: float = 1e-5) -> list:
    """Every differentiable op plus the end-to-end loss; tolerance 1e-3 (32-bit) or 1e-5 (64-bit)."""
    tol = 1e-5 if np.dtype(dtype) == np.float64 else 1e-3
    rng = np.random.default_rng(seed)
    results = []
    with precision(dtype):
        for name, f, x in op_cases(rng):
            results.append(CheckResult(name, grad_check(f, Tensor(x), min_scale=MIN_SCALE), tol, np.size(x)))
        for name, f, x, coords in end_to_end_cases(rng):
            coords = smooth_coords(f, Tensor(x), coords, e2e_eps, tol)
            err = grad_check(f, Tensor(x), eps=e2e_eps, coords=coords, min_scale=MIN_SCALE)
            results.append(CheckResult(name, err, tol, len(coords)))
    return results
