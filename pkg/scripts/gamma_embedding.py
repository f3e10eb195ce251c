"""Embed the visual-modulator outputs of a trained model in 2-D and report class separation.

Usage: python3 scripts/gamma_embedding.py [--ckpt artifacts/desk/full.ckpt] [--out artifacts/embedding]
"""

import argparse
from pathlib import Path

from modseg import analysis as an
from modseg.checkpoint import read_checkpoint
from modseg.dataio import SyntheticSpec, gen_dataset


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--ckpt", default="artifacts/desk/full.ckpt")
    ap.add_argument("--out", default="artifacts/embedding")
    ap.add_argument("--sequences", type=int, default=20)
    ap.add_argument("--seed", type=int, default=5000)
    args = ap.parse_args()
    model = read_checkpoint(args.ckpt).model
    seqs = gen_dataset(SyntheticSpec(n_frames=2, n_sequences=args.sequences), args.seed)
    crops, tags = an.first_frame_guides(seqs, model.config.guide_resolution)
    gm = an.collect_gammas(model, crops, tags)
    emb = an.classical_mds(an.pairwise_distances(gm.values))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "embedding.csv").write_text(an.embedding_csv(emb, tags))
    intra, inter = an.class_separation(gm)
    print(f"{len(crops)} guides, stress {emb.stress:.4f}")
    print(f"mean gamma distance: intra-class {intra:.5f}, inter-class {inter:.5f}")
    for p in an.layer_std_profile(gm):
        print(f"layer {p.layer}: mean std {p.mean_std:.5f}")


if __name__ == "__main__":
    main()
