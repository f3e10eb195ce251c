"""Desk-scale synthetic benchmark: train the full model and its two ablations
on the same data and seeds, then score them on held-out sequences.

Trained checkpoints and scores are cached in an output directory so that
repeated runs (and the acceptance suite) only pay for training once.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .checkpoint import read_checkpoint, write_checkpoint
from .config import RunConfig, desk_benchmark
from .dataio import SyntheticSpec, gen_dataset, static_samples
from .evaluation import EvalReport, evaluate_labels
from .inference import segment_objects
from .modnet import ModelBundle, init_model
from .training import train_static, train_video, write_curve

log = logging.getLogger(__name__)

VARIANTS = {
    "full": {},
    "no_visual": {"model.use_visual": "false"},
    "no_spatial": {"model.use_spatial": "false"},
}

TRAIN_SEED = 1000
TEST_SEED = 2000


@dataclass
class DeskData:
    train: list
    test: list

    @classmethod
    def generate(cls, n_train: int = 40, n_test: int = 20, spec: Optional[SyntheticSpec] = None) -> "DeskData":
        spec = spec or SyntheticSpec()
        train = gen_dataset(dataclasses.replace(spec, n_sequences=n_train), TRAIN_SEED, "train")
        test = gen_dataset(dataclasses.replace(spec, n_sequences=n_test), TEST_SEED, "test")
        return cls(train, test)


def variant_config(variant: str, base: Optional[RunConfig] = None) -> RunConfig:
    cfg = copy.deepcopy(base or desk_benchmark())
    return cfg.update(VARIANTS[variant])


def train_variant(cfg: RunConfig, train_seqs: list, stage1_out=None) -> tuple:
    """Stage 1 then stage 2 from a seeded random init; returns (model, curve, seconds).

    ``stage1_out``, if given, receives a checkpoint of the stage-1 model.
    """
    model = init_model(cfg.model, seed=cfg.seed)
    t0 = time.perf_counter()
    samples = static_samples(train_seqs)
    _, c1 = train_static(model, samples, cfg.train)
    t1 = time.perf_counter()
    if stage1_out is not None:
        write_checkpoint(stage1_out, model, cfg, meta={"train_seconds": round(t1 - t0, 3), "stage": "static"})
    t2 = time.perf_counter()
    _, c2 = train_video(model, train_seqs, cfg.train)
    return model, c1 + c2, time.perf_counter() - t2 + (t1 - t0)


def centroid(mask: np.ndarray) -> Optional[np.ndarray]:
    ys, xs = np.nonzero(mask)
    if len(xs) == 0:
        return None
    return np.array([xs.mean(), ys.mean()])


def lookalike_pairs(seq) -> list:
    """(object, distractor) for every ordered pair of distinct objects sharing a class tag."""
    pairs = []
    for a in seq.object_ids:
        for b in seq.object_ids:
            if a != b and seq.tags.get(a) and seq.tags.get(a) == seq.tags.get(b):
                pairs.append((a, b))
    return pairs


def disambiguation_counts(result, seq) -> tuple:
    """(hits, frames) over look-alike objects: a frame is a hit when the object's
    predicted centroid is closer to its own annotated centroid than to the
    distractor's.  Frames where either instance is invisible are skipped;
    an empty prediction counts as a miss."""
    hits = total = 0
    for k, d in lookalike_pairs(seq):
        masks = result.objects[k].masks
        for t in range(1, len(seq)):
            own, other = centroid(seq.mask(t, k)), centroid(seq.mask(t, d))
            if own is None or other is None:
                continue
            total += 1
            c = centroid(masks[t])
            if c is not None and np.linalg.norm(c - own) < np.linalg.norm(c - other):
                hits += 1
    return hits, total


def score(model: ModelBundle, test_seqs: list, threshold: float = 0.5) -> dict:
    report = EvalReport()
    hits = total = 0
    for seq in test_seqs:
        res = segment_objects(model, seq, threshold)
        report.objects.extend(evaluate_labels(res.labels, seq))
        h, n = disambiguation_counts(res, seq)
        hits, total = hits + h, total + n
    return {"j_mean": report.j_mean, "f_mean": report.f_mean,
            "disambiguation": hits / total if total else float("nan"),
            "disambiguation_frames": total, "report_csv": report.to_csv()}


@dataclass
class VariantResult:
    name: str
    j_mean: float
    f_mean: float
    disambiguation: float
    train_seconds: float
    checkpoint: str
    extra: dict = field(default_factory=dict)


def fingerprint(cfg: RunConfig, spec: Optional[SyntheticSpec] = None) -> str:
    """Hash of everything a cached result depends on: run config, data spec and seeds."""
    spec = spec or SyntheticSpec()
    text = f"{cfg.dumps()}\n{dataclasses.asdict(spec)}\n{TRAIN_SEED} {TEST_SEED}"
    return hashlib.blake2b(text.encode(), digest_size=8).hexdigest()


def run_variant(name: str, out_dir, data: Optional[DeskData] = None, force: bool = False,
                base: Optional[RunConfig] = None) -> VariantResult:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt, summary = out / f"{name}.ckpt", out / f"{name}.json"
    cfg = variant_config(name, base)
    key = fingerprint(cfg)
    if summary.is_file() and ckpt.is_file() and not force:
        d = json.loads(summary.read_text())
        if d.get("extra", {}).get("fingerprint") == key:
            d["checkpoint"] = str(ckpt)
            return VariantResult(**d)
        log.info("%s: cached result is stale, retraining", name)
        force = True
    data = data or DeskData.generate()
    if force or not ckpt.is_file():
        log.info("training %s", name)
        model, curve, secs = train_variant(cfg, data.train, stage1_out=out / f"{name}_stage1.ckpt")
        write_checkpoint(ckpt, model, cfg, meta={"train_seconds": round(secs, 3), "variant": name})
        write_curve(out / f"{name}_loss.csv", curve)
        (out / f"{name}_config.txt").write_text(cfg.dumps())
    ck = read_checkpoint(ckpt)  # score exactly what was saved
    model, secs = ck.model, float(ck.meta["train_seconds"])
    s = score(model, data.test)
    (out / f"{name}_eval.csv").write_text(s.pop("report_csv"))
    extra = {"disambiguation_frames": s["disambiguation_frames"], "fingerprint": key}
    s1 = out / f"{name}_stage1.ckpt"
    if s1.is_file():
        extra["stage1_j_mean"] = score(read_checkpoint(s1).model, data.test)["j_mean"]
    res = VariantResult(name, s["j_mean"], s["f_mean"], s["disambiguation"], secs, str(ckpt), extra)
    summary.write_text(json.dumps(res.__dict__, indent=2) + "\n")
    return res


def run_all(out_dir, variants=tuple(VARIANTS), force: bool = False) -> dict:
    data = None
    results = {}
    for v in variants:
        results[v] = run_variant(v, out_dir, data, force)
    return results
