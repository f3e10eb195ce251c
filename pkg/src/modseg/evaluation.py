"""Region similarity J, contour accuracy F, and their mean / recall / decay statistics."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

from .errors import ShapeError


def _pair(pred, gt):
    p, g = np.asarray(pred) > 0, np.asarray(gt) > 0
    if p.shape != g.shape:
        raise ShapeError(f"prediction {p.shape} and ground truth {g.shape} differ")
    return p, g


def region_j(pred, gt) -> float:
    """Intersection over union; 1 when both masks are empty."""
    p, g = _pair(pred, gt)
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, g).sum() / union)


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with a 4-neighbour in the background (outside the image counts as background)."""
    m = np.asarray(mask) > 0
    interior = ndimage.binary_erosion(m, structure=ndimage.generate_binary_structure(2, 1), border_value=0)
    return m & ~interior


def default_tolerance(shape: tuple) -> int:
    return int(math.ceil(0.008 * math.hypot(*shape)))


def contour_f(pred, gt, tol_px: Optional[int] = None) -> float:
    """Boundary F-measure with a Chebyshev matching tolerance of ``tol_px`` pixels.

    Both empty counts as a perfect match.
    """
    p, g = _pair(pred, gt)
    tol = default_tolerance(p.shape) if tol_px is None else int(tol_px)
    bp, bg = boundary(p), boundary(g)
    if not bp.any() and not bg.any():
        return 1.0
    if not bp.any() or not bg.any():
        return 0.0
    if tol > 0:
        square = np.ones((2 * tol + 1, 2 * tol + 1), dtype=bool)
        gd = ndimage.binary_dilation(bg, structure=square)
        pd = ndimage.binary_dilation(bp, structure=square)
    else:
        gd, pd = bg, bp
    precision = (bp & gd).sum() / bp.sum()
    recall = (bg & pd).sum() / bg.sum()
    if precision + recall == 0:
        return 0.0
    return float(2 * precision * recall / (precision + recall))


@dataclass
class Stats:
    mean: float
    recall: float
    decay: Optional[float]


def measure_stats(values) -> Stats:
    """Mean, fraction above 0.5, and first-quartile minus last-quartile mean.

    Decay needs at least four values and is None otherwise.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("no values")
    decay = None
    if v.size >= 4:
        bins = np.array_split(v, 4)
        decay = float(bins[0].mean() - bins[-1].mean())
    return Stats(float(v.mean()), float((v > 0.5).mean()), decay)


def over_time_curve(values, bins: int = 10) -> np.ndarray:
    """Per-bin means with frame t (1-based, of T) in bin floor(bins * (t-1) / T)."""
    v = np.asarray(values, dtype=np.float64)
    n = v.size
    if n < bins:
        warnings.warn(f"only {n} values for {bins} bins; empty bins are dropped", RuntimeWarning)
    idx = (bins * np.arange(n)) // n
    return np.array([v[idx == b].mean() for b in range(bins) if np.any(idx == b)])


@dataclass
class ObjectEval:
    sequence: str
    object_id: int
    j: list
    f: list

    @property
    def j_stats(self) -> Stats:
        return measure_stats(self.j)

    @property
    def f_stats(self) -> Stats:
        return measure_stats(self.f)


@dataclass
class EvalReport:
    objects: list = field(default_factory=list)

    def _mean(self, attr: str, key: str) -> float:
        vals = [getattr(getattr(o, attr), key) for o in self.objects]
        vals = [v for v in vals if v is not None]
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def j_mean(self) -> float:
        return self._mean("j_stats", "mean")

    @property
    def f_mean(self) -> float:
        return self._mean("f_stats", "mean")

    def summary(self) -> dict:
        return {f"{m}_{k}": self._mean(f"{m.lower()}_stats", k)
                for m in ("J", "F") for k in ("mean", "recall", "decay")}

    def curve(self, bins: int = 10, measure: str = "j") -> np.ndarray:
        curves = [over_time_curve(getattr(o, measure), bins) for o in self.objects]
        curves = [c for c in curves if c.size == bins]
        return np.mean(curves, axis=0) if curves else np.zeros(0)

    def to_csv(self) -> str:
        lines = ["sequence,object,J_mean,J_recall,J_decay,F_mean,F_recall,F_decay"]

        def fmt(x):
            return "" if x is None else f"{x:.6f}"
        for o in self.objects:
            js, fs = o.j_stats, o.f_stats
            lines.append(",".join([o.sequence, str(o.object_id)] +
                                  [fmt(x) for x in (js.mean, js.recall, js.decay, fs.mean, fs.recall, fs.decay)]))
        return "\n".join(lines) + "\n"


def evaluate_object(pred_masks: list, gt_masks: list, sequence: str = "", object_id: int = 1,
                    tol_px: Optional[int] = None) -> ObjectEval:
    """Per-frame J and F, skipping frame 0 and frames without ground truth."""
    j, f = [], []
    for t in range(1, len(gt_masks)):
        g = gt_masks[t]
        if g is None:
            continue
        p = pred_masks[t] if t < len(pred_masks) and pred_masks[t] is not None else np.zeros_like(g)
        j.append(region_j(p, g))
        f.append(contour_f(p, g, tol_px))
    return ObjectEval(sequence, object_id, j, f)


def evaluate_labels(pred_labels: list, gt_seq, tol_px: Optional[int] = None) -> list:
    """Evaluate merged label maps against a Sequence, one ObjectEval per object."""
    out = []
    for k in gt_seq.object_ids:
        gts = [None if a is None else a == k for a in gt_seq.annotations]
        preds = [None if p is None else np.asarray(p) == k for p in pred_labels]
        out.append(evaluate_object(preds, gts, gt_seq.name, k, tol_px))
    return out


def evaluate_dirs(pred_root, gt_root, tol_px: Optional[int] = None) -> EvalReport:
    """Compare every ground-truth sequence under ``gt_root`` with ``pred_root/<seq>/masks``."""
    from .dataio import _numbered_pngs, _read, load_dataset

    report = EvalReport()
    for seq in load_dataset(gt_root):
        d = Path(pred_root) / seq.name / "masks"
        files = _numbered_pngs(d) if d.is_dir() else {}
        preds = [(_read(files[t], "P") if t in files else None) for t in range(len(seq))]
        report.objects.extend(evaluate_labels(preds, seq, tol_px))
    return report
