"""Introspection of trained modulators: gamma embeddings via classical MDS,
per-layer gamma spread, and spatial-scale magnitudes."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import guides as gd
from .errors import ContractError
from .modnet import ModelBundle, visual_modulate


@dataclass
class GammaMatrix:
    values: np.ndarray  # rows = guides, columns = modulation parameters
    tags: list
    partition: tuple

    @property
    def n_layers(self) -> int:
        return len(self.partition)


@dataclass
class Embedding2D:
    coords: np.ndarray
    stress: float
    eigenvalues: np.ndarray = field(default_factory=lambda: np.zeros(0))


def collect_gammas(model: ModelBundle, guides: list, tags: Optional[list] = None) -> GammaMatrix:
    rows = [np.asarray(visual_modulate(model, g).gamma.data[0], dtype=np.float64) for g in guides]
    values = np.stack(rows) if rows else np.zeros((0, model.dim))
    return GammaMatrix(values, list(tags) if tags is not None else [""] * len(rows), model.partition())


def first_frame_guides(sequences, resolution: int) -> tuple:
    """(visual guides, class tags) for every object annotated in a sequence's first frame."""
    crops, tags = [], []
    for seq in sequences:
        for k in seq.object_ids:
            m = seq.mask(0, k)
            if m is None or not m.any():
                continue
            crops.append(gd.crop_guide(gd.to_network(seq.frames[0]), m, resolution))
            tags.append(seq.tags.get(k, ""))
    return crops, tags


def pairwise_distances(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    sq = (x * x).sum(axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2 * x @ x.T, 0.0)
    np.fill_diagonal(d2, 0.0)
    return np.sqrt(d2)


def jacobi_eigh(a: np.ndarray, tol: float = 1e-12, max_sweeps: int = 100) -> tuple:
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Stops once the off-diagonal Frobenius norm drops below
    ``tol * max(1, ||A||_F)``.  Returns (eigenvalues, eigenvectors as columns),
    unsorted.
    """
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    v = np.eye(n)
    scale = max(1.0, float(np.linalg.norm(a)))
    for _ in range(max_sweeps):
        off = float(np.linalg.norm(a - np.diag(np.diag(a))))  # direct, a difference of squares cancels
        if off < tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                diff = a[q, q] - a[p, p]
                if abs(diff) + 1e3 * abs(apq) == abs(diff):
                    t = apq / diff  # small-angle limit, avoids overflow in tau**2
                else:
                    tau = diff / (2.0 * apq)
                    t = (1.0 if tau >= 0 else -1.0) / (abs(tau) + np.sqrt(1.0 + tau * tau))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                ap, aq = a[:, p].copy(), a[:, q].copy()
                a[:, p], a[:, q] = c * ap - s * aq, s * ap + c * aq
                ap, aq = a[p, :].copy(), a[q, :].copy()
                a[p, :], a[q, :] = c * ap - s * aq, s * ap + c * aq
                a[p, q] = a[q, p] = 0.0
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p], v[:, q] = c * vp - s * vq, s * vp + c * vq
    return np.diag(a).copy(), v


def classical_mds(dist: np.ndarray, dim: int = 2) -> Embedding2D:
    """Torgerson scaling: double-center -D^2/2, keep the top ``dim`` eigenpairs."""
    d = np.asarray(dist, dtype=np.float64)
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise ContractError(f"distance matrix must be square, got {d.shape}")
    scale = max(1.0, float(np.abs(d).max(initial=0.0)))
    if not np.allclose(d, d.T, rtol=0, atol=1e-9 * scale):
        raise ContractError("distance matrix is not symmetric")
    if np.any(d < 0) or np.any(np.diag(d) != 0):
        raise ContractError("distances must be non-negative with a zero diagonal")
    n = d.shape[0]
    if n == 0:
        return Embedding2D(np.zeros((0, dim)), 0.0)
    j = np.eye(n) - 1.0 / n
    b = -0.5 * j @ (d * d) @ j
    b = 0.5 * (b + b.T)
    evals, evecs = jacobi_eigh(b)
    order = np.argsort(-evals, kind="stable")
    evals, evecs = evals[order], evecs[:, order]
    k = min(dim, n)
    lam = np.clip(evals[:k], 0.0, None)
    coords = np.zeros((n, dim))
    coords[:, :k] = evecs[:, :k] * np.sqrt(lam)
    return Embedding2D(coords, stress(d, pairwise_distances(coords)), evals)


def stress(d: np.ndarray, d_hat: np.ndarray) -> float:
    """Kruskal stress-1 over the upper triangle; 0 when every distance is 0."""
    iu = np.triu_indices(d.shape[0], 1)
    num = ((d[iu] - d_hat[iu]) ** 2).sum()
    den = (d[iu] ** 2).sum()
    if den == 0:
        return float(np.sqrt(num))
    return float(np.sqrt(num / den))


def class_separation(gm: GammaMatrix) -> tuple:
    """(mean intra-class, mean inter-class) pairwise gamma distance over tagged rows."""
    d = pairwise_distances(gm.values)
    tags = np.asarray(gm.tags)
    same = tags[:, None] == tags[None, :]
    off = ~np.eye(len(tags), dtype=bool)
    return float(d[same & off].mean()), float(d[~same].mean())


@dataclass
class Histogram:
    counts: np.ndarray
    edges: np.ndarray

    def to_csv(self) -> str:
        lines = ["bin_lo,bin_hi,count"]
        lines += [f"{lo:.8g},{hi:.8g},{int(c)}" for lo, hi, c in zip(self.edges[:-1], self.edges[1:], self.counts)]
        return "\n".join(lines) + "\n"


def _histogram(x: np.ndarray, bins: int, lo: float, hi: float) -> Histogram:
    if hi <= lo:
        lo, hi = lo - 0.5, lo + 0.5
    counts, edges = np.histogram(x, bins=bins, range=(lo, hi))
    return Histogram(counts, edges)


@dataclass
class LayerProfile:
    layer: int
    stds: np.ndarray
    hist: Histogram

    @property
    def mean_std(self) -> float:
        return float(self.stds.mean())


def layer_std_profile(gm: GammaMatrix, bins: int = 32) -> list:
    """Population std of every gamma across guides, grouped by layer, histogrammed on a shared range."""
    if gm.values.shape[0] < 2:
        raise ContractError("need at least two guides to measure spread")
    stds = gm.values.std(axis=0)
    lo, hi = float(stds.min()), float(stds.max())
    return [LayerProfile(l, stds[a:b], _histogram(stds[a:b], bins, lo, hi))
            for l, (a, b) in enumerate(gm.partition)]


@dataclass
class SpatialLayerStats:
    layer: int
    magnitudes: np.ndarray
    zero_fraction: float
    hist: Histogram


def spatial_scale_stats(model: ModelBundle, zero_eps: float = 1e-3, bins: int = 32) -> list:
    """Per modulated layer: |scale| of every channel, their histogram, and the share below ``zero_eps``."""
    n = len(model.config.modulated_channels())
    mags = [np.abs(model.params[f"spatial.layer{l}.w"].data.reshape(-1)).astype(np.float64) for l in range(n)]
    hi = max(float(m.max()) for m in mags)
    return [SpatialLayerStats(l, m, float((m < zero_eps).mean()), _histogram(m, bins, 0.0, hi))
            for l, m in enumerate(mags)]


def embedding_csv(emb: Embedding2D, tags: list) -> str:
    lines = ["tag,x,y"] + [f"{t},{x:.8g},{y:.8g}" for t, (x, y) in zip(tags, emb.coords[:, :2])]
    return "\n".join(lines) + "\n"
