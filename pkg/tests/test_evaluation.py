import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import ndimage

from modseg.dataio import SyntheticSpec, gen_dataset, write_dataset
from modseg.errors import ShapeError
from modseg.evaluation import (EvalReport, boundary, contour_f, default_tolerance, evaluate_dirs, evaluate_labels,
                               evaluate_object, measure_stats, over_time_curve, region_j)


def square(n=30, y=5, x=5, s=10):
    m = np.zeros((n, n), bool)
    m[y:y + s, x:x + s] = True
    return m


def brute_f(p, g, tol):
    """Exact boundary matching by pairwise Chebyshev distances."""
    bp, bg = np.argwhere(boundary(p)), np.argwhere(boundary(g))
    if len(bp) == 0 and len(bg) == 0:
        return 1.0
    if len(bp) == 0 or len(bg) == 0:
        return 0.0
    d = np.abs(bp[:, None, :] - bg[None, :, :]).max(axis=2)
    prec = (d.min(axis=1) <= tol).mean()
    rec = (d.min(axis=0) <= tol).mean()
    return 0.0 if prec + rec == 0 else 2 * prec * rec / (prec + rec)


masks = st.integers(0, 2**31 - 1).map(
    lambda s: np.random.default_rng(s).uniform(size=(2, 16, 16)) > np.random.default_rng(s + 1).uniform(0.3, 0.9))


# ------------------------------------------------------------------ J

def test_region_j_examples():
    a = square()
    assert region_j(a, a) == 1.0
    assert region_j(square(x=0, s=5), square(x=20, s=5)) == 0.0
    assert region_j(square(x=5), square(x=10)) == pytest.approx(1 / 3)
    z = np.zeros((4, 4), bool)
    assert region_j(z, z) == 1.0 and region_j(z, square(4, 0, 0, 2)) == 0.0


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        region_j(np.zeros((3, 3)), np.zeros((3, 4)))
    with pytest.raises(ShapeError):
        contour_f(np.zeros((3, 3)), np.zeros((3, 4)))


@given(masks)
def test_j_symmetric_and_bounded(pg):
    p, g = pg
    assert region_j(p, g) == region_j(g, p)
    assert 0 <= region_j(p, g) <= 1


@given(masks, st.integers(-4, 4), st.integers(-4, 4))
def test_j_translation_invariant(pg, dy, dx):
    p, g = (np.pad(m, 5) for m in pg)
    sh = lambda m: np.roll(np.roll(m, dy, 0), dx, 1)
    assert region_j(sh(p), sh(g)) == region_j(p, g)


# ------------------------------------------------------------------ F

def test_contour_f_examples():
    a = square()
    assert contour_f(a, a) == 1.0
    assert contour_f(np.zeros_like(a), a) == 0.0
    eroded = ndimage.binary_erosion(a)
    assert contour_f(eroded, a, tol_px=1) == 1.0
    assert brute_f(eroded, a, 1) == 1.0
    assert contour_f(eroded, a, tol_px=0) == 0.0


def test_default_tolerance():
    assert default_tolerance((64, 64)) == 1
    assert default_tolerance((480, 854)) == 8


@settings(max_examples=60, deadline=None)
@given(masks, st.integers(0, 3))
def test_contour_f_matches_brute_force(pg, tol):
    p, g = pg
    assert contour_f(p, g, tol) == pytest.approx(brute_f(p, g, tol), abs=1e-12)


@given(masks, st.integers(0, 3))
def test_contour_f_symmetric_and_monotone(pg, tol):
    p, g = pg
    assert contour_f(p, g, tol) == pytest.approx(contour_f(g, p, tol), abs=1e-12)
    assert contour_f(p, g, tol) <= contour_f(p, g, tol + 1) + 1e-12
    assert 0 <= contour_f(p, g, tol) <= 1


def test_boundary_is_4_adjacent():
    b = boundary(square(7, 1, 1, 5))
    assert b.sum() == 16 and not b[3, 3]
    full = boundary(np.ones((3, 3), bool))  # image border counts as background
    assert full.sum() == 8


# ------------------------------------------------------------------ statistics

def test_stats_examples():
    s = measure_stats([0.8] * 10)
    assert s.mean == pytest.approx(0.8) and s.recall == 1.0 and s.decay == pytest.approx(0.0, abs=1e-15)
    v = np.linspace(1.0, 0.0, 8)
    assert measure_stats(v).decay == pytest.approx(np.mean([1.0, 6 / 7]) - np.mean([1 / 7, 0.0]))
    assert measure_stats([0.4] * 6).recall == 0.0
    assert measure_stats([0.5, 0.6, 0.9]).decay is None


@given(st.lists(st.floats(0, 1), min_size=4, max_size=30), st.randoms(use_true_random=False))
def test_stats_order(vals, rnd):
    s = measure_stats(vals)
    shuffled = list(vals)
    rnd.shuffle(shuffled)
    t = measure_stats(shuffled)
    assert s.mean == pytest.approx(t.mean) and s.recall == t.recall
    assert -1 <= s.decay <= 1


def test_curve_examples():
    np.testing.assert_allclose(over_time_curve([0.7] * 20, 10), 0.7)
    v = np.random.default_rng(0).uniform(size=13)
    np.testing.assert_allclose(over_time_curve(v, 1), [v.mean()])


def test_curve_staircase_hand_binned():
    v = np.repeat([0.1, 0.2, 0.3, 0.4, 0.5], 3)  # T=15
    # bins=5: frame t goes to floor(5 (t-1) / 15) = (t-1) // 3
    np.testing.assert_allclose(over_time_curve(v, 5), [0.1, 0.2, 0.3, 0.4, 0.5])
    # bins=4: floor(4 (t-1) / 15) -> sizes 4, 4, 4, 3
    idx = [(4 * i) // 15 for i in range(15)]
    expect = [v[np.array(idx) == b].mean() for b in range(4)]
    np.testing.assert_allclose(over_time_curve(v, 4), expect)


def test_curve_short_warns():
    with pytest.warns(RuntimeWarning):
        c = over_time_curve([1.0, 0.5, 0.25], 10)
    assert c.tolist() == [1.0, 0.5, 0.25]


# ------------------------------------------------------------------ reports

def test_gt_against_itself(tmp_path):
    seqs = gen_dataset(SyntheticSpec(n_frames=8, n_sequences=2), 3)
    write_dataset(seqs, tmp_path / "gt")
    rep = evaluate_dirs(tmp_path / "gt", tmp_path / "gt")
    s = rep.summary()
    assert s["J_mean"] == 1.0 and s["F_mean"] == 1.0 and s["J_decay"] == 0.0 and s["F_decay"] == 0.0
    assert len(rep.objects) == sum(len(q.object_ids) for q in seqs)


def test_frame_zero_excluded_and_missing_prediction_is_empty():
    gt = [square(), square(), square()]
    preds = [np.zeros((30, 30), bool), square(), None]
    o = evaluate_object(preds, gt)
    assert o.j == [1.0, 0.0]


def test_csv_header_and_rows():
    seqs = gen_dataset(SyntheticSpec(n_frames=6, n_sequences=1), 4)
    rep = EvalReport(evaluate_labels(seqs[0].annotations, seqs[0]))
    lines = rep.to_csv().splitlines()
    assert lines[0] == "sequence,object,J_mean,J_recall,J_decay,F_mean,F_recall,F_decay"
    assert len(lines) == 1 + len(seqs[0].object_ids)
    assert lines[1].split(",")[2] == "1.000000"
