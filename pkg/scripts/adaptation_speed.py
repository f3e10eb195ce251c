"""Compare per-object adaptation cost: one modulator pass against one-shot fine-tuning.

Usage: python3 scripts/adaptation_speed.py [--ckpt artifacts/desk/full.ckpt] [--iters 100]
"""

import argparse
import time

import numpy as np
from scipy import stats as sps

from modseg import guides as gd
from modseg.checkpoint import read_checkpoint
from modseg.config import desk_benchmark
from modseg.dataio import SyntheticSpec, gen_synthetic
from modseg.inference import segment_sequence
from modseg.modnet import visual_modulate
from modseg.training import finetune_oneshot


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--ckpt", default="artifacts/desk/full.ckpt")
    ap.add_argument("--iters", type=int, default=100)
    ap.add_argument("--seed", type=int, default=2000)
    args = ap.parse_args()
    model = read_checkpoint(args.ckpt).model
    seq = gen_synthetic(SyntheticSpec(), args.seed)
    k = seq.object_ids[0]
    mask0 = seq.annotations[0] == k
    guide = gd.crop_guide(gd.to_network(seq.frames[0]), mask0, model.config.guide_resolution)

    visual_modulate(model, guide)
    reps = []
    for _ in range(20):
        t0 = time.perf_counter()
        visual_modulate(model, guide)
        reps.append(time.perf_counter() - t0)
    t_mod = float(np.median(reps))
    train = desk_benchmark().train
    t0 = time.perf_counter()
    finetune_oneshot(model, seq.frames[0], mask0, args.iters, train.oneshot_lr, train)
    t_ft = time.perf_counter() - t0
    print(f"modulator pass {t_mod * 1e3:.2f} ms, {args.iters}-step fine-tune {t_ft:.2f} s, ratio {t_ft / t_mod:.0f}x")

    lengths = np.repeat([2, 5, 10, 15, 20], 4)
    np.random.default_rng(0).shuffle(lengths)
    ms = [segment_sequence(model, seq.frames[:t], seq.annotations[0], k).adapt_ms for t in lengths]
    fit = sps.linregress(lengths, ms)
    print(f"adaptation time vs sequence length: slope {fit.slope:.4f} ms/frame, p = {fit.pvalue:.3f}")


if __name__ == "__main__":
    main()
