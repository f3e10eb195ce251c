"""``modseg`` command line.

Exit codes: 0 success, 1 numeric failure (non-finite loss, failed gradient
check), 2 usage or I/O error.  ``MODSEG_THREADS`` caps BLAS threads (default 1).
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .config import RunConfig, load_config, parse_config_text
from .errors import ConfigError, DataIOError, ModsegError, NumericError

log = logging.getLogger("modseg")

CONFIG_ECHO = "run_config.txt"


class UsageError(Exception):
    pass


def _overrides(pairs) -> dict:
    out = {}
    for p in pairs or []:
        if "=" not in p:
            raise UsageError(f"--set expects key=value, got {p!r}")
        k, v = p.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _echo(cfg: RunConfig, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(cfg.dumps())


# ------------------------------------------------------------------ make-synthetic

def cmd_make_synthetic(args) -> int:
    from .dataio import gen_dataset, write_dataset

    cfg = RunConfig(seed=args.seed, out=args.out)
    if args.spec:
        p = Path(args.spec)
        if not p.is_file():
            raise DataIOError(p, "spec file not found")
        pairs = parse_config_text(p.read_text())
        cfg.update({k if "." in k else f"synthetic.{k}": v for k, v in pairs.items()})
    spec = dataclasses.replace(cfg.synthetic)  # re-runs validation
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if spec.n_sequences == 0:
        log.warning("spec asks for 0 sequences; %s is left without sequences", out)
        seqs = []
    else:
        seqs = gen_dataset(spec, args.seed, prefix=args.prefix)
    write_dataset(seqs, out)
    _echo(cfg, out / CONFIG_ECHO)
    print(f"wrote {len(seqs)} sequences to {out}")
    return 0


# ------------------------------------------------------------------ train

def cmd_train(args) -> int:
    from .checkpoint import read_checkpoint, write_checkpoint
    from .dataio import load_dataset, static_samples
    from .modnet import init_model
    from .training import Trainer, train_static, train_video, write_curve

    ckpt = read_checkpoint(args.init) if args.init else None
    base = ckpt.config if ckpt else RunConfig()
    cfg = load_config(args.config, _overrides(args.set), base=base)
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.train.stage = args.stage
    cfg.data.train = str(args.data)
    cfg.out = str(args.out)
    if ckpt and cfg.model != ckpt.model.config:
        raise ConfigError("model settings differ from the initial checkpoint")
    epochs_key = "static_epochs" if args.stage == "static" else "video_epochs"
    if args.epochs is not None:
        if args.epochs < 0:
            raise UsageError("--epochs must be >= 0")
        if args.epochs > 0:
            setattr(cfg.train, epochs_key, args.epochs)

    out = Path(args.out)
    stem = out.with_suffix("")
    sequences = load_dataset(args.data)
    if not sequences:
        raise DataIOError(Path(args.data), "no sequences found")

    if args.epochs == 0:
        if ckpt is None:
            raise UsageError("--epochs 0 only makes sense with --init")
        write_checkpoint(out, ckpt.model, ckpt.config, ckpt.meta, ckpt.adam)
        _echo(ckpt.config, Path(f"{stem}.config.txt"))
        print(f"no training requested; re-emitted {out}")
        return 0

    _echo(cfg, Path(f"{stem}.config.txt"))
    print(cfg.dumps(), end="")
    model = ckpt.model if ckpt else init_model(cfg.model, seed=cfg.seed)
    lr = cfg.train.static_lr if args.stage == "static" else cfg.train.video_lr
    tr = Trainer(model, cfg.train, lr, seed_offset=1 if args.stage == "static" else 2)
    prev_steps = int(ckpt.meta.get("steps", 0)) if ckpt else 0
    if ckpt and ckpt.adam is not None and ckpt.meta.get("stage") == args.stage:
        tr.opt.state = ckpt.adam
        tr.rng = np.random.default_rng([cfg.train.seed, tr.opt.state.t])
    t0 = time.perf_counter()
    if args.stage == "static":
        train_static(model, static_samples(sequences), cfg.train, trainer=tr)
    else:
        train_video(model, sequences, cfg.train, trainer=tr)
    secs = time.perf_counter() - t0
    meta = {"stage": args.stage, "steps": prev_steps + tr.step_count}
    write_checkpoint(out, model, cfg, meta, tr.opt.state)
    write_curve(Path(f"{stem}.loss.csv"), tr.curve)
    last = tr.curve[-1].loss if tr.curve else float("nan")
    print(f"trained {tr.step_count} steps in {secs:.1f}s, final loss {last:.4f}; wrote {out}")
    return 0


# ------------------------------------------------------------------ infer

def cmd_infer(args) -> int:
    from .checkpoint import read_checkpoint
    from .dataio import load_dataset
    from .inference import segment_objects, write_results

    ck = read_checkpoint(args.ckpt)
    cfg = ck.config
    cfg.data.test = str(args.data)
    cfg.train.oneshot_iters = args.oneshot_iters
    if args.oneshot_lr is not None:
        cfg.train.oneshot_lr = args.oneshot_lr
    cfg.out = str(args.out)
    if args.oneshot_iters < 0:
        raise UsageError("--oneshot-iters must be >= 0")
    if not 0 <= args.threshold <= 1:
        raise UsageError("--threshold must be in [0, 1]")
    results = []
    for seq in load_dataset(args.data):
        results.append(segment_objects(ck.model, seq, args.threshold, args.oneshot_iters,
                                       cfg.train.oneshot_lr, cfg.train))
    write_results(results, args.out)
    _echo(cfg, Path(args.out) / CONFIG_ECHO)
    print(f"segmented {len(results)} sequences into {args.out}")
    return 0


# ------------------------------------------------------------------ eval

def cmd_eval(args) -> int:
    from .evaluation import evaluate_dirs

    for p in (args.pred, args.gt):
        if not Path(p).is_dir():
            raise DataIOError(Path(p), "not a directory")
    report = evaluate_dirs(args.pred, args.gt)
    out = Path(args.report)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_csv())
    stem = out.with_suffix("")
    curve = np.zeros(0)
    if report.objects:
        # short sequences get one bin per frame rather than an empty curve
        curve = report.curve(bins=max(1, min(10, min(len(o.j) for o in report.objects))))
    Path(f"{stem}.curve.csv").write_text("bin,mean\n" + "".join(f"{i},{v:.10g}\n" for i, v in enumerate(curve)))
    cfg = RunConfig(out=str(out))
    cfg.data.test = str(args.gt)
    _echo(cfg, Path(f"{stem}.config.txt"))
    for k, v in report.summary().items():
        print(f"{k} {v:.4f}")
    return 0


# ------------------------------------------------------------------ analyze

def _guides(root, resolution: int) -> tuple:
    from .analysis import first_frame_guides
    from .dataio import load_dataset

    return first_frame_guides(load_dataset(root), resolution)


def cmd_analyze(args) -> int:
    from . import analysis as an
    from .checkpoint import read_checkpoint

    ck = read_checkpoint(args.ckpt)
    out = Path(args.out)
    cfg = ck.config
    cfg.data.guides = str(args.guides)
    cfg.out = str(out)
    crops = tags = None
    if args.mode != "spatialstats":  # read inputs before creating any output
        crops, tags = _guides(args.guides, ck.model.config.guide_resolution)
        if not crops:
            raise DataIOError(Path(args.guides), "no annotated objects found")
    out.mkdir(parents=True, exist_ok=True)
    if args.mode == "spatialstats":
        stats = an.spatial_scale_stats(ck.model, zero_eps=args.zero_eps, bins=args.bins)
        lines = ["layer,mean_abs,zero_fraction"]
        for s in stats:
            (out / f"spatial_layer{s.layer}.csv").write_text(s.hist.to_csv())
            lines.append(f"{s.layer},{s.magnitudes.mean():.8g},{s.zero_fraction:.8g}")
        (out / "spatialstats.csv").write_text("\n".join(lines) + "\n")
        print("\n".join(lines))
    else:
        gm = an.collect_gammas(ck.model, crops, tags)
        if args.mode == "embedding":
            emb = an.classical_mds(an.pairwise_distances(gm.values))
            (out / "embedding.csv").write_text(an.embedding_csv(emb, tags))
            print(f"{len(tags)} guides, stress {emb.stress:.4g}")
            if len(set(tags)) > 1 and len(tags) > len(set(tags)):
                intra, inter = an.class_separation(gm)
                print(f"intra-class {intra:.6g} inter-class {inter:.6g}")
        else:
            profiles = an.layer_std_profile(gm, bins=args.bins)
            lines = ["layer,mean_std"]
            for p in profiles:
                (out / f"layerstd_layer{p.layer}.csv").write_text(p.hist.to_csv())
                lines.append(f"{p.layer},{p.mean_std:.8g}")
            (out / "layerstd.csv").write_text("\n".join(lines) + "\n")
            print("\n".join(lines))
    _echo(cfg, out / CONFIG_ECHO)
    return 0


# ------------------------------------------------------------------ gradcheck

def cmd_gradcheck(args) -> int:
    from .selfcheck import run_gradcheck

    t0 = time.perf_counter()
    dtype = np.float64 if args.dtype == "float64" else np.float32
    rows = run_gradcheck(dtype, seed=args.seed)
    for r in rows:
        print(f"{r.name:40s} {r.error:.3e} < {r.tol:.0e}  {'ok' if r.passed else 'FAIL'}")
    failed = [r for r in rows if not r.passed]
    print(f"{len(rows) - len(failed)}/{len(rows)} passed in {time.perf_counter() - t0:.1f}s")
    if args.out:
        cfg = RunConfig(seed=args.seed, out=args.out)
        _echo(cfg, Path(args.out) / CONFIG_ECHO)
    return 1 if failed else 0


# ------------------------------------------------------------------ entry point

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="modseg", description="Segmentation by network modulation.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-synthetic", help="generate a synthetic moving-shapes dataset")
    p.add_argument("--spec", help="key = value file of synthetic settings")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--prefix", default="seq")
    p.set_defaults(func=cmd_make_synthetic)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--stage", choices=("static", "video"), required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--init", help="checkpoint to start from")
    p.add_argument("--epochs", type=int, help="epochs for this stage (0 re-emits --init)")
    p.add_argument("--seed", type=int)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="segment every object of every sequence")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--oneshot-iters", type=int, default=0)
    p.add_argument("--oneshot-lr", type=float)
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score predicted masks against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="inspect trained modulators")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--guides", default="")
    p.add_argument("--mode", choices=("embedding", "layerstd", "spatialstats"), required=True)
    p.add_argument("--out", default="analysis")
    p.add_argument("--bins", type=int, default=32)
    p.add_argument("--zero-eps", type=float, default=1e-3)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    p.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gradcheck)
    return ap


def _threads() -> int:
    raw = os.environ.get("MODSEG_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"MODSEG_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"MODSEG_THREADS must be a positive integer, got {raw!r}")
    return n


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        with threadpool_limits(_threads()):
            return args.func(args)
    except NumericError as exc:
        print(f"modseg: numeric failure: {exc}", file=sys.stderr)
        return 1
    except (UsageError, ConfigError) as exc:
        print(f"modseg: error: {exc}", file=sys.stderr)
        return 2
    except DataIOError as exc:
        print(f"modseg: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ModsegError, ValueError) as exc:
        print(f"modseg: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
