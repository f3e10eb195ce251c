import dataclasses

import numpy as np
import pytest
from hypothesis import given, strategies as st

from modseg import inference as inf
from modseg.dataio import Sequence, SyntheticSpec, gen_synthetic
from modseg.errors import EmptyMaskError
from modseg.inference import merge_objects, segment_objects, segment_sequence, write_results
from modseg.modnet import ModConfig, init_model

SMALL = ModConfig(stage_channels=(4, 4, 6, 6, 8, 8), visual_channels=(3, 3, 4, 4, 4, 4), guide_resolution=16,
                  fusion_channels=4, input_sizes=(16, 24))
SEQ = SyntheticSpec(height=32, width=32, n_frames=6, radius_range=(5.0, 7.0), singles=1)


@pytest.fixture(scope="module")
def model():
    m = init_model(SMALL, seed=0)
    m.params["visual.fc.w"].data[...] = np.random.default_rng(0).standard_normal(m.params["visual.fc.w"].shape) * 0.1
    return m


# ------------------------------------------------------------------ merging

def test_merge_single_object_is_threshold():
    p = np.random.default_rng(0).uniform(size=(6, 7))
    np.testing.assert_array_equal(merge_objects({3: p}), np.where(p > 0.5, 3, 0))


def test_merge_disjoint_objects_preserved():
    a, b = np.zeros((5, 5)), np.zeros((5, 5))
    a[:2] = 0.95
    b[3:] = 0.99
    lab = merge_objects({1: a, 2: b})
    assert np.all(lab[:2] == 1) and np.all(lab[3:] == 2) and np.all(lab[2] == 0)


def test_merge_argmax_and_ties():
    assert merge_objects({1: np.array([[0.7]]), 2: np.array([[0.9]])})[0, 0] == 2
    assert merge_objects({4: np.array([[0.8]]), 2: np.array([[0.8]])})[0, 0] == 2
    assert merge_objects({1: np.array([[0.5]])})[0, 0] == 0  # strictly above threshold


@given(st.integers(0, 2**31 - 1))
def test_merge_labels_valid(seed):
    rng = np.random.default_rng(seed)
    probs = {k: rng.uniform(size=(4, 5)) for k in (1, 3, 7)}
    lab = merge_objects(probs)
    assert set(np.unique(lab)) <= {0, 1, 3, 7}


# ------------------------------------------------------------------ per-sequence loop

def test_visual_modulator_called_once_per_object(model, monkeypatch):
    calls = []
    real = inf.visual_modulate
    monkeypatch.setattr(inf, "visual_modulate", lambda *a, **k: calls.append(1) or real(*a, **k))
    seq = gen_synthetic(dataclasses.replace(SEQ, n_frames=30), 1)
    segment_sequence(model, seq.frames, seq.annotations[0], 1)
    assert len(calls) == 1
    calls.clear()
    segment_objects(model, seq)
    assert len(calls) == len(seq.object_ids)


def test_frame_zero_and_binary_outputs(model):
    seq = gen_synthetic(SEQ, 2)
    res = segment_objects(model, seq)
    assert res.labels[0].tobytes() == seq.annotations[0].astype(np.uint8).tobytes()
    for k, r in res.objects.items():
        assert np.array_equal(r.masks[0], seq.annotations[0] == k)
        assert r.priors[0] is None and len(r.masks) == len(seq) and len(r.frame_ms) == len(seq) - 1
        assert all(m.dtype == bool for m in r.masks)
    assert all(set(np.unique(l)) <= {0, *seq.object_ids} for l in res.labels)


def test_empty_first_mask_is_input_error(model):
    seq = gen_synthetic(SEQ, 2)
    with pytest.raises(EmptyMaskError):
        segment_sequence(model, seq.frames, seq.annotations[0], 9)


def test_empty_prediction_reuses_last_prior(model):
    m = model.clone()
    m.params["segnet.fuse.b"].data[...] = -1e3  # every prediction empty
    seq = gen_synthetic(SEQ, 3)
    r = segment_sequence(m, seq.frames, seq.annotations[0], 1)
    assert not any(mk.any() for mk in r.masks[1:])
    assert all(p == r.priors[1] for p in r.priors[1:])


def test_deterministic(model):
    seq = gen_synthetic(SEQ, 4)
    a = segment_objects(model, seq)
    b = segment_objects(model, seq)
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a.labels, b.labels))
    for k in a.objects:
        assert all(x.tobytes() == y.tobytes() for x, y in zip(a.objects[k].probs, b.objects[k].probs))


def test_odd_frame_size(model):
    spec = dataclasses.replace(SEQ, height=30, width=34)
    seq = gen_synthetic(spec, 5)
    r = segment_sequence(model, seq.frames, seq.annotations[0], 1)
    assert all(p.shape == (30, 34) for p in r.probs)


def test_write_results_layout(model, tmp_path):
    seq = gen_synthetic(SEQ, 6, name="abc")
    write_results([segment_objects(model, seq)], tmp_path)
    assert sorted(p.name for p in (tmp_path / "abc" / "masks").iterdir()) == [f"{t:05d}.png" for t in range(6)]
    lines = (tmp_path / "timing.csv").read_text().splitlines()
    assert lines[0] == "sequence,object,adapt_ms,mean_frame_ms"
    assert [l.split(",")[:2] for l in lines[1:]] == [["abc", str(k)] for k in seq.object_ids]


# ------------------------------------------------------------------ trained-model oracles

def iou(a, b):
    return (a & b).sum() / max((a | b).sum(), 1)


@pytest.mark.slow
def test_identical_frames_track_in_place(desk_model):
    scores = []
    for seed in range(5):
        seq = gen_synthetic(SyntheticSpec(n_frames=2), 3000 + seed)
        frames = [seq.frames[0], seq.frames[0]]
        for k in seq.object_ids:
            r = segment_sequence(desk_model, frames, seq.annotations[0], k)
            scores.append(iou(r.masks[1], seq.annotations[0] == k))
    assert np.mean(scores) >= 0.9 and np.min(scores) >= 0.75


@pytest.mark.slow
def test_constant_velocity_disk_centroid(desk_model):
    spec = SyntheticSpec(n_frames=20, lookalike_pairs=0, singles=1, classes=("disk",), speed_range=(1.0, 1.0),
                         jitter=0.0)
    for seed in range(3):
        seq = gen_synthetic(spec, 4000 + seed)
        r = segment_sequence(desk_model, seq.frames, seq.annotations[0], 1)
        errs = []
        for t in range(1, len(seq)):
            ys, xs = np.nonzero(seq.annotations[t] == 1)
            py, px = np.nonzero(r.masks[t])
            if len(xs) and len(px):
                errs.append(np.hypot(px.mean() - xs.mean(), py.mean() - ys.mean()))
            else:
                errs.append(np.inf)
        radius = np.sqrt((seq.annotations[0] == 1).sum() / np.pi)
        assert np.mean(errs) < radius
