"""Balanced cross-entropy, the static-image and video training stages, and one-shot fine-tuning."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

import numpy as np

from . import autodiff as ad
from . import guides as gd
from .autodiff import Adam, Tape, Tensor, backward, make_result
from .autodiff.ops import resize_array
from .dataio import Sequence, StaticSample
from .errors import ConfigError, ContractError, NumericError, ShapeError
from .modnet import ModelBundle, modulated_forward

log = logging.getLogger(__name__)

LOG_CLAMP = math.log(1e-7)


@dataclass
class TrainConfig:
    stage: str = "static"
    static_epochs: int = 10
    static_lr: float = 1e-5
    static_epochs2: int = 5
    static_lr2: float = 1e-6
    video_epochs: int = 20
    video_lr: float = 1e-6
    oneshot_iters: int = 100
    oneshot_lr: float = 1e-6
    batch_size: int = 4
    input_sizes: Optional[tuple] = None  # None: use the model config's sizes
    seed: int = 0
    random_crop: bool = True
    crop_min: float = 0.8  # smallest crop side as a fraction of the frame side
    aug_visual: bool = True
    aug_spatial: bool = True
    visual_scale: float = 0.1
    visual_angle: float = 10.0
    spatial_shift: float = 0.2
    spatial_scale: float = 0.4
    spatial_relative: str = "object"
    freeze: tuple = ()  # parameter-name prefixes excluded from updates
    log_every: int = 50

    def __post_init__(self):
        self.freeze = tuple(self.freeze)
        if self.input_sizes is not None:
            self.input_sizes = tuple(int(s) for s in self.input_sizes)

    def validate(self) -> "TrainConfig":
        if self.stage not in ("static", "video", "oneshot"):
            raise ConfigError(f"unknown stage {self.stage!r}")
        for name in ("static_lr", "static_lr2", "video_lr", "oneshot_lr"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0")
        for name in ("static_epochs", "video_epochs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.static_epochs2 < 0 or self.oneshot_iters < 0:
            raise ConfigError("epoch and iteration counts must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0 < self.crop_min <= 1:
            raise ConfigError("crop_min must be in (0, 1]")
        return self


@dataclass
class LossReport:
    step: int
    loss: float
    beta: float
    n_pos: int
    n_neg: int
    degenerate: bool = False  # target was all foreground or all background


# ------------------------------------------------------------------ loss

def class_balance(target: np.ndarray) -> tuple:
    """(beta, |Y+|, |Y-|) with beta = |Y-| / |Y| for a single binary target."""
    t = np.asarray(target) > 0
    n_pos = int(t.sum())
    n_neg = t.size - n_pos
    return n_neg / t.size, n_pos, n_neg


def balanced_ce(logits: Tensor, target) -> Tensor:
    """Class-balanced sigmoid cross-entropy, normalized by the pixel count.

    Per image: ``-(beta * sum_{Y+} log p + (1 - beta) * sum_{Y-} log(1 - p)) / |Y|``
    with ``beta = |Y-| / |Y|``; the batch loss is the mean over images.  Log
    terms are clamped below at log(1e-7).
    """
    z = logits.data
    t = np.asarray(target) > 0
    if z.ndim == 4 and z.shape[1] == 1:
        z4 = z
    else:
        raise ShapeError(f"logits must be [N,1,H,W], got {z.shape}")
    if t.ndim == 2:
        t = t[None]
    if t.shape != (z.shape[0],) + z.shape[2:]:
        raise ShapeError(f"target {t.shape} does not match logits {z.shape}")
    zz = z4[:, 0].astype(np.float64)
    n = zz.shape[0]
    npix = zz[0].size
    beta = (~t).reshape(n, -1).sum(axis=1) / npix
    bw = beta[:, None, None]
    # log p = -softplus(-z); log(1-p) = -softplus(z)
    sp_neg = np.logaddexp(0.0, -zz)
    sp_pos = np.logaddexp(0.0, zz)
    logp, logq = -sp_neg, -sp_pos
    lp = np.maximum(logp, LOG_CLAMP)
    lq = np.maximum(logq, LOG_CLAMP)
    per = -(bw * np.where(t, lp, 0.0) + (1 - bw) * np.where(t, 0.0, lq)).reshape(n, -1).sum(axis=1) / npix
    loss = per.mean()

    def bwd(g):
        p = np.exp(logp)
        dpos = np.where(logp > LOG_CLAMP, -(1 - p), 0.0) * bw
        dneg = np.where(logq > LOG_CLAMP, p, 0.0) * (1 - bw)
        dz = np.where(t, dpos, dneg) / (npix * n)
        return ((g * dz)[:, None].astype(logits.data.dtype),)

    return make_result("balanced_ce", np.asarray(loss), (logits,), bwd)


def write_curve(path, curve: Iterable[LossReport]) -> None:
    with open(path, "w") as f:
        f.write("step,loss,beta\n")
        for r in curve:
            f.write(f"{r.step},{r.loss:.8g},{r.beta:.8g}\n")


# ------------------------------------------------------------------ sample preparation

@dataclass
class Batch:
    images: np.ndarray  # N,3,S,S network space
    guides: np.ndarray  # N,3,R,R
    heatmaps: np.ndarray  # N,S,S
    targets: np.ndarray  # N,S,S bool


def _crop_resize(arrs: list, box: tuple, size: int) -> list:
    y0, y1, x0, x1 = box
    out = []
    for a in arrs:
        sub = a[..., y0:y1, x0:x1]
        out.append(resize_array(sub, size, size))
    return out


def random_box(h: int, w: int, rng: np.random.Generator, crop_min: float, enabled: bool = True) -> tuple:
    if not enabled or crop_min >= 1:
        return 0, h, 0, w
    f = rng.uniform(crop_min, 1.0)
    ch, cw = max(1, int(round(f * h))), max(1, int(round(f * w)))
    y0 = int(rng.integers(0, h - ch + 1))
    x0 = int(rng.integers(0, w - cw + 1))
    return y0, y0 + ch, x0, x0 + cw


def make_example(image: np.ndarray, target: np.ndarray, guide_image: np.ndarray, guide_mask: np.ndarray,
                 prior_mask: np.ndarray, size: int, cfg: TrainConfig, resolution: int,
                 rng: np.random.Generator) -> tuple:
    """One training example: (image, visual guide, heatmap, target) at ``size``.

    ``prior_mask`` is the mask the spatial guide is derived from (the target
    itself for static images, the previous frame's mask for video).
    """
    net_guide = gd.to_network(guide_image)
    if cfg.aug_visual:
        vg = gd.augment_visual(net_guide, guide_mask, rng, resolution,
                               max_scale=cfg.visual_scale, max_angle=cfg.visual_angle)
    else:
        vg = gd.crop_guide(net_guide, guide_mask, resolution)

    h, w = target.shape
    img = gd.to_network(image)
    for _ in range(10):
        box = random_box(h, w, rng, cfg.crop_min, cfg.random_crop)
        x, tgt, prior = _crop_resize([img, target.astype(np.float64), prior_mask.astype(np.float64)], box, size)
        tgt, prior = tgt >= 0.5, prior >= 0.5
        if tgt.any() and prior.any():
            break
    else:
        x, tgt, prior = _crop_resize([img, target.astype(np.float64), prior_mask.astype(np.float64)],
                                     (0, h, 0, w), size)
        tgt, prior = tgt >= 0.5, prior >= 0.5
        if not prior.any():
            prior = tgt
    stats = gd.mask_stats(prior)
    if cfg.aug_spatial:
        stats = gd.augment_spatial(stats, rng, (size, size), max_shift=cfg.spatial_shift,
                                   max_scale=cfg.spatial_scale, relative_to=cfg.spatial_relative)
    heat = gd.gaussian_heatmap(stats, size, size).heatmap
    return x.astype(np.float32), vg.image, heat, tgt


def stack(examples: list) -> Batch:
    xs, gs, hs, ts = zip(*examples)
    return Batch(np.stack(xs), np.stack(gs), np.stack(hs), np.stack(ts))


# ------------------------------------------------------------------ training loop

class Trainer:
    """Adam over the model's trainable parameters, one image size per batch.

    Batches are run as a single batched forward; samples within a batch share
    the randomly chosen input size.
    """

    def __init__(self, model: ModelBundle, cfg: TrainConfig, lr: float, seed_offset: int = 0):
        self.model = model
        self.cfg = cfg.validate()
        params = {k: v for k, v in model.trainable().items() if not any(k.startswith(p) for p in cfg.freeze)}
        self.opt = Adam(params, lr=lr)
        self.rng = np.random.default_rng([cfg.seed, seed_offset])
        self.sizes = cfg.input_sizes or model.config.input_sizes
        self.curve: list = []
        self.step_count = 0

    def pick_size(self) -> int:
        return int(self.sizes[self.rng.integers(len(self.sizes))])

    def step(self, batch: Batch) -> LossReport:
        model = self.model
        for p in model.params.values():
            p.grad = None
        with Tape() as tape:
            logits = modulated_forward(model, batch.images, batch.guides, batch.heatmaps)
            loss = balanced_ce(logits, batch.targets)
        value = float(loss.data)
        if not math.isfinite(value):
            raise NumericError(f"non-finite loss {value} at step {self.step_count}")
        backward(loss, tape)
        self.opt.step()
        betas = [class_balance(t) for t in batch.targets]
        rep = LossReport(self.step_count, value, float(np.mean([b[0] for b in betas])),
                         sum(b[1] for b in betas), sum(b[2] for b in betas),
                         any(b[1] == 0 or b[2] == 0 for b in betas))
        self.curve.append(rep)
        if self.cfg.log_every and self.step_count % self.cfg.log_every == 0:
            log.info("step %d loss %.4f", self.step_count, value)
        self.step_count += 1
        return rep


def _static_example(s: StaticSample, size: int, cfg: TrainConfig, res: int, rng) -> tuple:
    return make_example(s.image, s.mask, s.image, s.mask, s.mask, size, cfg, res, rng)


def train_static(model: ModelBundle, samples: list, cfg: TrainConfig,
                 trainer: Optional[Trainer] = None, callback: Optional[Callable] = None):
    """Stage 1: each static image is its own visual and spatial guide.

    Runs ``static_epochs`` at ``static_lr`` then ``static_epochs2`` at
    ``static_lr2``.  Updates ``model`` in place; returns (model, loss curve).
    """
    if not samples:
        raise ContractError("train_static needs at least one sample")
    tr = trainer or Trainer(model, cfg, cfg.static_lr, seed_offset=1)
    res = model.config.guide_resolution
    phases = [(cfg.static_epochs, cfg.static_lr), (cfg.static_epochs2, cfg.static_lr2)]
    for epochs, lr in phases:
        tr.opt.lr = lr
        for _ in range(epochs):
            order = tr.rng.permutation(len(samples))
            for i in range(0, len(order), cfg.batch_size):
                size = tr.pick_size()
                ex = [_static_example(samples[j], size, cfg, res, tr.rng) for j in order[i:i + cfg.batch_size]]
                rep = tr.step(stack(ex))
                if callback:
                    callback(rep)
    return model, tr.curve


def video_items(sequences: list) -> list:
    """All (sequence index, object id, t) with annotated, non-empty masks at t-1 and t."""
    items = []
    for si, seq in enumerate(sequences):
        for k in seq.object_ids:
            for t in range(1, len(seq)):
                a, b = seq.mask(t - 1, k), seq.mask(t, k)
                if a is not None and b is not None and a.any() and b.any():
                    items.append((si, k, t))
    return items


def pick_guide_frame(seq: Sequence, object_id: int, rng: np.random.Generator) -> int:
    """A uniformly random frame in which the object is annotated and visible."""
    frames = [t for t in range(len(seq)) if (m := seq.mask(t, object_id)) is not None and m.any()]
    return frames[int(rng.integers(len(frames)))]


def train_video(model: ModelBundle, sequences: list, cfg: TrainConfig,
                trainer: Optional[Trainer] = None, callback: Optional[Callable] = None):
    """Stage 2: guide from a random frame of the object, prior from the ground truth at t-1."""
    items = video_items(sequences)
    if not items:
        raise ContractError("train_video needs annotated sequences")
    tr = trainer or Trainer(model, cfg, cfg.video_lr, seed_offset=2)
    tr.opt.lr = cfg.video_lr
    res = model.config.guide_resolution
    for _ in range(cfg.video_epochs):
        order = tr.rng.permutation(len(items))
        for i in range(0, len(order), cfg.batch_size):
            size = tr.pick_size()
            ex = []
            for j in order[i:i + cfg.batch_size]:
                si, k, t = items[j]
                seq = sequences[si]
                u = pick_guide_frame(seq, k, tr.rng)
                ex.append(make_example(seq.frames[t], seq.mask(t, k), seq.frames[u], seq.mask(u, k),
                                       seq.mask(t - 1, k), size, cfg, res, tr.rng))
            rep = tr.step(stack(ex))
            if callback:
                callback(rep)
    return model, tr.curve


def finetune_oneshot(model: ModelBundle, frame0: np.ndarray, mask0: np.ndarray, iters: int = 100,
                     lr: float = 1e-6, cfg: Optional[TrainConfig] = None,
                     history: Optional[list] = None) -> ModelBundle:
    """Adapted copy of ``model`` after ``iters`` Adam steps on the annotated first frame."""
    clone = model.clone()
    if iters <= 0:
        return clone
    mask0 = np.asarray(mask0) > 0
    if not mask0.any():
        raise ContractError("first-frame mask is empty")
    cfg = cfg or TrainConfig()
    cfg = TrainConfig(**{**cfg.__dict__, "stage": "oneshot", "oneshot_lr": lr, "batch_size": 1})
    tr = Trainer(clone, cfg, lr, seed_offset=3)
    size = frame0.shape[0] if frame0.shape[0] == frame0.shape[1] else None
    res = clone.config.guide_resolution
    sample = StaticSample(frame0, mask0, "", ("", 0, 0))
    for _ in range(iters):
        s = size or tr.pick_size()
        rep = tr.step(stack([_static_example(sample, s, cfg, res, tr.rng)]))
        if history is not None:
            history.append(rep)
    return clone
