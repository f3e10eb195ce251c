"""Sequences on disk (DAVIS-style layout) and a synthetic moving-shapes generator.

Layout::

    <root>/<sequence>/frames/00000.png   8-bit RGB
    <root>/<sequence>/masks/00000.png    8-bit indexed, 0 = background, k = object k
    <root>/<sequence>/objects.txt        optional "id,tag" lines

Frames are numbered from 00000 with five digits.  Annotations may be missing
for any frame but the first.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import DataIOError, SpecError

log = logging.getLogger(__name__)

SHAPES = ("disk", "square", "triangle")
PALETTES = {
    "disk": ((210, 50, 50), (235, 125, 40), (200, 40, 125)),
    "square": ((60, 180, 70), (150, 205, 50), (35, 160, 140)),
    "triangle": ((60, 90, 225), (125, 70, 205), (50, 155, 235)),
}


@dataclass
class Sequence:
    name: str
    frames: list
    annotations: list  # per frame: HxW uint8 label map, or None when absent
    object_ids: list = field(default_factory=list)
    tags: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.frames:
            raise ValueError("sequence has no frames")
        if len(self.annotations) != len(self.frames):
            raise ValueError("one annotation slot per frame required")
        if self.annotations[0] is None:
            raise ValueError("frame 0 must be annotated")
        if not self.object_ids:
            self.object_ids = [int(k) for k in np.unique(self.annotations[0]) if k != 0]

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def size(self) -> tuple:
        return self.frames[0].shape[:2]

    def mask(self, t: int, object_id: int) -> Optional[np.ndarray]:
        a = self.annotations[t]
        return None if a is None else a == object_id


@dataclass
class SyntheticSpec:
    height: int = 64
    width: int = 64
    n_frames: int = 20
    n_sequences: int = 20
    classes: tuple = SHAPES
    lookalike_pairs: int = 1
    singles: int = 2
    radius_range: tuple = (9.0, 13.0)
    speed_range: tuple = (0.4, 1.4)  # px / frame
    jitter: float = 0.3  # std of per-frame position noise, px
    approach_range: tuple = (1.7, 1.95)  # closest center distance of a look-alike pair, in radii
    flyby_prob: float = 1.0  # chance a single object crosses a pair member
    flyby_gap: tuple = (0.9, 1.5)  # center offset at the crossing frame, in mean radii (< 2 overlaps)
    noise_std: float = 6.0
    min_visible: float = 0.5
    max_tries: int = 200

    def __post_init__(self):
        for name in ("classes", "radius_range", "speed_range", "approach_range", "flyby_gap"):
            setattr(self, name, tuple(getattr(self, name)))


# ------------------------------------------------------------------ rendering

def render_shape(shape: str, cx: float, cy: float, r: float, h: int, w: int) -> np.ndarray:
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    if shape == "disk":
        return (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r
    if shape == "square":
        a = 0.85 * r
        return (np.abs(xs - cx) <= a) & (np.abs(ys - cy) <= a)
    if shape == "triangle":
        R = 1.15 * r
        angles = np.radians([-90.0, 30.0, 150.0])
        vx, vy = cx + R * np.cos(angles), cy + R * np.sin(angles)
        inside = np.ones((h, w), dtype=bool)
        for i in range(3):
            x0, y0, x1, y1 = vx[i], vy[i], vx[(i + 1) % 3], vy[(i + 1) % 3]
            inside &= (x1 - x0) * (ys - y0) - (y1 - y0) * (xs - x0) >= 0
        return inside
    raise ValueError(f"unknown shape {shape!r}")


def _visible_fraction(shape, cx, cy, r, h, w) -> float:
    pad = int(np.ceil(2 * r)) + 2
    full = render_shape(shape, cx + pad, cy + pad, r, h + 2 * pad, w + 2 * pad)
    inner = full[pad:pad + h, pad:pad + w]
    return inner.sum() / max(full.sum(), 1)


@dataclass
class _Obj:
    shape: str
    color: tuple
    radius: float
    track: np.ndarray  # T x 2 (x, y)


def _plan(spec: SyntheticSpec, rng: np.random.Generator) -> list:
    t_total = spec.n_frames
    h, w = spec.height, spec.width
    t = np.arange(t_total, dtype=np.float64)
    objs = []

    def velocity():
        speed = rng.uniform(*spec.speed_range)
        a = rng.uniform(0, 2 * np.pi)
        return speed * np.array([np.cos(a), np.sin(a)])

    used = []
    for _ in range(spec.lookalike_pairs):
        cls = spec.classes[rng.integers(len(spec.classes))]
        used.append(cls)
        color = PALETTES[cls][rng.integers(len(PALETTES[cls]))]
        r = rng.uniform(*spec.radius_range)
        t_star = rng.uniform(0.3, 0.7) * (t_total - 1)
        c = np.array([rng.uniform(0.35, 0.65) * w, rng.uniform(0.35, 0.65) * h])
        n_ang = rng.uniform(0, 2 * np.pi)
        n = np.array([np.cos(n_ang), np.sin(n_ang)])
        d = rng.uniform(*spec.approach_range) * r
        rel_speed = rng.uniform(*spec.speed_range)
        u = rel_speed * np.array([-n[1], n[0]]) * rng.choice([-1.0, 1.0])
        v0 = 0.3 * velocity()
        dt = (t - t_star)[:, None]
        objs.append(_Obj(cls, color, r, c + 0.5 * d * n + (v0 + 0.5 * u) * dt))
        objs.append(_Obj(cls, color, r, c - 0.5 * d * n + (v0 - 0.5 * u) * dt))

    pair_objs = list(objs)
    for _ in range(spec.singles):
        others = [c for c in spec.classes if c not in used] or list(spec.classes)
        cls = others[rng.integers(len(others))]
        color = PALETTES[cls][rng.integers(len(PALETTES[cls]))]
        r = rng.uniform(*spec.radius_range)
        v = velocity()
        if pair_objs and rng.uniform() < spec.flyby_prob:
            mate = pair_objs[rng.integers(len(pair_objs))]
            t_star = int(rng.integers(t_total))
            a = rng.uniform(0, 2 * np.pi)
            gap = rng.uniform(*spec.flyby_gap) * 0.5 * (r + mate.radius)
            p_star = mate.track[t_star] + gap * np.array([np.cos(a), np.sin(a)])
            track = p_star + v * (t - t_star)[:, None]
        else:
            p0 = np.array([rng.uniform(r, w - r), rng.uniform(r, h - r)])
            track = p0 + v * t[:, None]
        objs.append(_Obj(cls, color, r, track))

    if spec.jitter > 0:
        for o in objs:
            o.track = o.track + rng.normal(0.0, spec.jitter, size=o.track.shape)
    return objs


def _feasible(spec: SyntheticSpec, objs: list, labels: list) -> bool:
    h, w = spec.height, spec.width
    for o in objs:
        for cx, cy in o.track:
            if _visible_fraction(o.shape, cx, cy, o.radius, h, w) < spec.min_visible:
                return False
    for k, o in enumerate(objs, start=1):
        for lab in labels:
            m = lab == k
            if not m.any():
                return False
            _, n = ndimage.label(m)  # default structure is 4-connectivity
            if n != 1:
                return False
    for i in range(0, 2 * spec.lookalike_pairs, 2):
        a, b = objs[i], objs[i + 1]
        if np.linalg.norm(a.track - b.track, axis=1).min() > 2 * a.radius:
            return False
    return True


def _background(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    h, w = spec.height, spec.width
    base = rng.uniform(80, 150) + rng.uniform(-12, 12, size=3)
    grad = rng.uniform(-20, 20, size=(2, 3))
    ys = np.linspace(-0.5, 0.5, h)[:, None, None]
    xs = np.linspace(-0.5, 0.5, w)[None, :, None]
    return base + ys * grad[0] + xs * grad[1]


def gen_synthetic(spec: SyntheticSpec, seed: int, name: str = "synthetic") -> Sequence:
    """One deterministic sequence of moving shapes with exact label maps."""
    n_obj = 2 * spec.lookalike_pairs + spec.singles
    if n_obj < 1 or spec.n_frames < 1:
        raise SpecError("need at least one object and one frame")
    if n_obj > 255:
        raise SpecError("at most 255 objects fit an 8-bit label map")
    area = sum(np.pi * spec.radius_range[1] ** 2 for _ in range(n_obj))
    if area > 0.6 * spec.height * spec.width:
        raise SpecError(f"{n_obj} objects of radius up to {spec.radius_range[1]} do not fit "
                        f"a {spec.height}x{spec.width} canvas")
    rng = np.random.default_rng(seed)
    h, w = spec.height, spec.width
    for _ in range(spec.max_tries):
        objs = _plan(spec, rng)
        order = rng.permutation(n_obj)  # drawing order, back to front
        labels = []
        for t in range(spec.n_frames):
            lab = np.zeros((h, w), dtype=np.uint8)
            for k in order:
                o = objs[k]
                lab[render_shape(o.shape, *o.track[t], o.radius, h, w)] = k + 1
            labels.append(lab)
        if _feasible(spec, objs, labels):
            break
    else:
        raise SpecError(f"no feasible layout after {spec.max_tries} attempts")

    bg = _background(spec, rng)
    frames = []
    for lab in labels:
        img = bg.copy()
        for k, o in enumerate(objs, start=1):
            img[lab == k] = o.color
        img = img + rng.normal(0.0, spec.noise_std, size=img.shape)
        frames.append(np.clip(np.rint(img), 0, 255).astype(np.uint8))
    tags = {k: o.shape for k, o in enumerate(objs, start=1)}
    return Sequence(name, frames, labels, list(range(1, n_obj + 1)), tags)


def gen_dataset(spec: SyntheticSpec, seed: int, prefix: str = "seq") -> list:
    seeds = np.random.SeedSequence(seed).generate_state(max(spec.n_sequences, 1))
    return [gen_synthetic(spec, int(s), name=f"{prefix}{i:03d}")
            for i, s in zip(range(spec.n_sequences), seeds)]


# ------------------------------------------------------------------ disk I/O

def davis_palette() -> list:
    """The PASCAL/DAVIS indexed-color palette (768 entries)."""
    pal = []
    for i in range(256):
        r = g = b = 0
        c = i
        for j in range(8):
            r |= ((c >> 0) & 1) << (7 - j)
            g |= ((c >> 1) & 1) << (7 - j)
            b |= ((c >> 2) & 1) << (7 - j)
            c >>= 3
        pal += [r, g, b]
    return pal


def frame_name(t: int) -> str:
    return f"{t:05d}.png"


def write_mask(path, label: np.ndarray) -> None:
    im = Image.fromarray(np.asarray(label, dtype=np.uint8), mode="P")
    im.putpalette(davis_palette())
    im.save(path)


def write_sequence(seq: Sequence, root) -> Path:
    d = Path(root) / seq.name
    (d / "frames").mkdir(parents=True, exist_ok=True)
    (d / "masks").mkdir(parents=True, exist_ok=True)
    for t, (img, lab) in enumerate(zip(seq.frames, seq.annotations)):
        Image.fromarray(img, mode="RGB").save(d / "frames" / frame_name(t))
        if lab is not None:
            write_mask(d / "masks" / frame_name(t), lab)
    if seq.tags:
        lines = [f"{k},{seq.tags[k]}" for k in sorted(seq.tags)]
        (d / "objects.txt").write_text("\n".join(lines) + "\n")
    return d


def write_dataset(sequences: Iterable[Sequence], root) -> None:
    Path(root).mkdir(parents=True, exist_ok=True)
    for seq in sequences:
        write_sequence(seq, root)


def _numbered_pngs(d: Path) -> dict:
    out = {}
    for f in d.iterdir():
        if f.suffix.lower() == ".png" and f.stem.isdigit():
            out[int(f.stem)] = f
    return out


def _read(path: Path, mode: str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if mode == "RGB":
                return np.array(im.convert("RGB"))
            if im.mode not in ("P", "L"):
                raise DataIOError(path, f"mask must be 8-bit indexed or grayscale, got mode {im.mode}")
            return np.array(im, dtype=np.uint8)
    except DataIOError:
        raise
    except Exception as exc:  # PIL raises a zoo of types for corrupt files
        raise DataIOError(path, f"unreadable image ({exc})") from exc


def load_sequence(directory) -> Sequence:
    d = Path(directory)
    if not (d / "frames").is_dir():
        raise DataIOError(d / "frames", "missing frames directory")
    frame_files = _numbered_pngs(d / "frames")
    if not frame_files:
        raise DataIOError(d / "frames", "no frames")
    n = max(frame_files) + 1
    missing = [t for t in range(n) if t not in frame_files]
    if missing:
        raise DataIOError(d / "frames" / frame_name(missing[0]), "missing frame")
    frames = [_read(frame_files[t], "RGB") for t in range(n)]
    mask_files = _numbered_pngs(d / "masks") if (d / "masks").is_dir() else {}
    if 0 not in mask_files:
        raise DataIOError(d / "masks" / frame_name(0), "first-frame annotation missing")
    size = frames[0].shape[:2]
    for t, f in enumerate(frames):
        if f.shape[:2] != size:
            raise DataIOError(frame_files[t], f"size {f.shape[:2]} differs from {size}")
    annotations = []
    for t in range(n):
        if t in mask_files:
            a = _read(mask_files[t], "P")
            if a.shape != size:
                raise DataIOError(mask_files[t], f"size {a.shape} differs from {size}")
            annotations.append(a)
        else:
            annotations.append(None)
    tags = {}
    meta = d / "objects.txt"
    if meta.exists():
        for line in meta.read_text().splitlines():
            if line.strip():
                k, tag = line.split(",", 1)
                tags[int(k)] = tag.strip()
    return Sequence(d.name, frames, annotations, tags=tags)


def load_dataset(root) -> list:
    root = Path(root)
    if not root.is_dir():
        raise DataIOError(root, "not a directory")
    return [load_sequence(root / name) for name in sorted(os.listdir(root)) if (root / name / "frames").is_dir()]


# ------------------------------------------------------------------ static samples

@dataclass
class StaticSample:
    image: np.ndarray  # HxWx3 uint8
    mask: np.ndarray  # HxW bool
    tag: str
    source: tuple  # (sequence name, frame index, object id)


def static_samples(sequences: Iterable[Sequence], min_area_fraction: float = 0.03,
                   seed: Optional[int] = 0) -> list:
    """One sample per annotated (frame, object) whose area is at least ``min_area_fraction`` of the image."""
    out = []
    for seq in sequences:
        for t, lab in enumerate(seq.annotations):
            if lab is None:
                continue
            for k in seq.object_ids:
                m = lab == k
                if m.sum() >= min_area_fraction * m.size:
                    out.append(StaticSample(seq.frames[t], m, seq.tags.get(k, ""), (seq.name, t, k)))
    if seed is not None:
        order = np.random.default_rng(seed).permutation(len(out))
        out = [out[i] for i in order]
    return out
