"""Segmentation network, visual modulator and spatial modulator.

The segmentation network is a VGG-style stack of 3x3 convs with a hypercolumn
head.  Every conv from index ``skip_first`` on is followed by a modulation
layer ``y_c = gamma_c * x_c + beta_c``: ``gamma`` comes from the visual
modulator (one forward pass over the object crop), ``beta`` from the spatial
modulator (a per-channel affine map of the downsampled location heatmap).
"""

from __future__ import annotations

import copy
import hashlib
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError

VGG16_CHANNELS = (64, 64, 128, 128, 256, 256, 256, 512, 512, 512, 512, 512, 512)
VGG16_STAGES = (2, 2, 3, 3, 3)


@dataclass
class ModConfig:
    stage_channels: tuple = (16, 16, 32, 32, 64, 64)
    stage_sizes: tuple = (2, 2, 2)  # convs per stage; a 2x2 max pool precedes every stage but the first
    skip_first: int = 2
    guide_resolution: int = 64
    fusion_channels: int = 16
    input_sizes: tuple = (48, 56, 64)
    visual_channels: tuple = (8, 8, 16, 16, 32, 32)
    kernel_size: int = 3
    side_from_stage: int = 1
    modulate_before_relu: bool = True
    use_visual: bool = True
    use_spatial: bool = True
    spatial_init: float = 0.1

    def __post_init__(self):
        for name in ("stage_channels", "stage_sizes", "input_sizes", "visual_channels"):
            setattr(self, name, tuple(int(v) for v in getattr(self, name)))

    @classmethod
    def reference(cls) -> "ModConfig":
        """VGG16-sized layout (13 convs, 9 modulation layers, 224px guides)."""
        return cls(stage_channels=VGG16_CHANNELS, stage_sizes=VGG16_STAGES, skip_first=4,
                   guide_resolution=224, fusion_channels=16, input_sizes=(320, 400, 480),
                   visual_channels=VGG16_CHANNELS)

    @property
    def n_convs(self) -> int:
        return len(self.stage_channels)

    @property
    def n_pools(self) -> int:
        return len(self.stage_sizes) - 1

    def validate(self) -> "ModConfig":
        if sum(self.stage_sizes) != self.n_convs:
            raise ConfigError(f"stage_sizes {self.stage_sizes} do not cover {self.n_convs} convs")
        if len(self.visual_channels) != self.n_convs:
            raise ConfigError("visual_channels must list one width per conv layer")
        if not 0 <= self.skip_first < self.n_convs:
            raise ConfigError(f"skip_first={self.skip_first} must be in [0, {self.n_convs})")
        if not 0 <= self.side_from_stage < len(self.stage_sizes):
            raise ConfigError(f"side_from_stage={self.side_from_stage} out of range")
        if self.kernel_size % 2 != 1:
            raise ConfigError("kernel_size must be odd")
        if self.guide_resolution % (2 ** self.n_pools):
            raise ConfigError("guide_resolution must be divisible by 2**n_pools")
        for s in self.input_sizes:
            if s % (2 ** self.n_pools):
                raise ConfigError(f"input size {s} not divisible by {2 ** self.n_pools}")
        if min(self.stage_channels + self.visual_channels) < 1 or self.fusion_channels < 1:
            raise ConfigError("channel counts must be positive")
        return self

    def conv_stage(self) -> list:
        """Stage index of every conv layer."""
        return [s for s, n in enumerate(self.stage_sizes) for _ in range(n)]

    def modulated_channels(self) -> list:
        return list(self.stage_channels[self.skip_first:])

    def layer_sizes(self, h: int, w: int) -> list:
        """Spatial size of each modulated layer's feature map for an h x w input."""
        stages = self.conv_stage()
        return [(h >> stages[i], w >> stages[i]) for i in range(self.skip_first, self.n_convs)]


def count_modulated_layers(config: ModConfig) -> int:
    return config.n_convs - config.skip_first


@dataclass
class ModulationParams:
    """Flat channel scales for all modulated layers, [N, D], plus the per-layer partition."""

    gamma: Tensor
    partition: tuple

    @property
    def dim(self) -> int:
        return self.gamma.shape[-1]

    def layer(self, index: int) -> Tensor:
        lo, hi = self.partition[index]
        return self.gamma[:, lo:hi]


@dataclass
class SpatialPriorMaps:
    """Per modulated layer, the bias map [N, C_l, h_l, w_l]."""

    maps: list


@dataclass
class ModelBundle:
    config: ModConfig
    params: dict = field(default_factory=dict)

    def group(self, prefix: str) -> dict:
        return {k: v for k, v in self.params.items() if k.startswith(prefix + ".")}

    def trainable(self) -> dict:
        """Parameters that influence the output under the configured ablation."""
        out = {}
        for k, v in self.params.items():
            if k.startswith("visual.") and not self.config.use_visual:
                continue
            if k.startswith("spatial.") and not self.config.use_spatial:
                continue
            out[k] = v
        return out

    @property
    def dim(self) -> int:
        return sum(self.config.modulated_channels())

    def partition(self) -> tuple:
        bounds = np.cumsum([0] + self.config.modulated_channels())
        return tuple((int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]))

    def clone(self) -> "ModelBundle":
        return ModelBundle(copy.deepcopy(self.config),
                           {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.params.items()})

    def checksum(self) -> str:
        h = hashlib.blake2b(digest_size=16)
        for k, v in self.params.items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(v.data).tobytes())
        return h.hexdigest()

    def config_dict(self) -> dict:
        return asdict(self.config)


def _uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_model(config: Optional[ModConfig] = None, seed: int = 0) -> ModelBundle:
    """Fresh parameters.

    Convs get fan-in scaled uniform weights and zero biases.  The visual
    modulator's last layer has zero weights and unit biases, so it outputs
    gamma == 1 for every guide until trained.
    """
    config = (config or ModConfig()).validate()
    rng = np.random.default_rng(seed)
    k = config.kernel_size
    params = {}

    def add(name, arr):
        params[name] = Tensor(arr, requires_grad=True, name=name)

    cin = 3
    for i, c in enumerate(config.stage_channels):
        add(f"segnet.conv{i}.w", _uniform(rng, (c, cin, k, k), cin * k * k))
        add(f"segnet.conv{i}.b", np.zeros(c))
        cin = c
    stages = config.conv_stage()
    side_stages = range(config.side_from_stage, len(config.stage_sizes))
    for s in side_stages:
        last = max(i for i, st in enumerate(stages) if st == s)
        c = config.stage_channels[last]
        add(f"segnet.side{s}.w", _uniform(rng, (config.fusion_channels, c, 1, 1), c))
        add(f"segnet.side{s}.b", np.zeros(config.fusion_channels))
    fused = config.fusion_channels * len(side_stages)
    add("segnet.fuse.w", _uniform(rng, (1, fused, 1, 1), fused))
    add("segnet.fuse.b", np.zeros(1))

    cin = 3
    for i, c in enumerate(config.visual_channels):
        add(f"visual.conv{i}.w", _uniform(rng, (c, cin, k, k), cin * k * k))
        add(f"visual.conv{i}.b", np.zeros(c))
        cin = c
    dim = sum(config.modulated_channels())
    add("visual.fc.w", np.zeros((cin, dim)))
    add("visual.fc.b", np.ones(dim))

    a = config.spatial_init
    for l, c in enumerate(config.modulated_channels()):
        add(f"spatial.layer{l}.w", rng.uniform(-a, a, size=(c, 1, 1, 1)))
        add(f"spatial.layer{l}.b", rng.uniform(-a, a, size=c))
    return ModelBundle(config, params)


def _as_batch(x, channels: Optional[int] = None) -> Tensor:
    arr = getattr(x, "image", x)
    arr = getattr(arr, "heatmap", arr)
    t = arr if isinstance(arr, Tensor) else Tensor(np.asarray(arr))
    if channels is None:  # heatmaps: [H,W] | [N,H,W] | [N,1,H,W]
        if t.ndim == 2:
            t = Tensor(t.data[None, None])
        elif t.ndim == 3:
            t = Tensor(t.data[:, None])
    elif t.ndim == 3:
        t = Tensor(t.data[None])
    return t


def visual_modulate(model: ModelBundle, guide) -> ModulationParams:
    """Channel scales for all modulation layers from one pass over the visual guide.

    ``guide`` is a VisualGuide or an array [3,R,R] / [N,3,R,R] in network-input space.
    """
    cfg = model.config
    x = _as_batch(guide, channels=3)
    r = cfg.guide_resolution
    if x.ndim != 4 or x.shape[1:] != (3, r, r):
        raise ShapeError(f"visual guide must be [N,3,{r},{r}], got {x.shape}")
    part = model.partition()
    if not cfg.use_visual:
        return ModulationParams(Tensor(np.ones((x.shape[0], model.dim))), part)
    p = model.params
    feat = x
    for i, stage in enumerate(cfg.conv_stage()):
        if i > 0 and stage != cfg.conv_stage()[i - 1]:
            feat = ad.maxpool2(feat)
        feat = ad.relu(ad.conv2d(feat, p[f"visual.conv{i}.w"], p[f"visual.conv{i}.b"]))
    pooled = ad.global_avg_pool(feat)
    gamma = ad.linear(pooled, p["visual.fc.w"], p["visual.fc.b"])
    return ModulationParams(gamma, part)


def spatial_modulate(model: ModelBundle, guide, layer_sizes: Optional[list] = None) -> SpatialPriorMaps:
    """Bias maps ``beta_l[c] = scale_c * m_l + shift_c`` with m_l the heatmap resized to layer l."""
    cfg = model.config
    m = _as_batch(guide)
    if m.ndim != 4 or m.shape[1] != 1:
        raise ShapeError(f"spatial guide must be [H,W] or [N,H,W], got {m.shape}")
    h, w = m.shape[2:]
    expected = cfg.layer_sizes(h, w)
    if layer_sizes is not None and [tuple(s) for s in layer_sizes] != expected:
        raise ShapeError(f"layer sizes {layer_sizes} inconsistent with config ({expected}) for {h}x{w} input")
    p = model.params
    maps = []
    for l, (lh, lw) in enumerate(expected):
        ml = ad.bilinear_resize(m, lh, lw)
        maps.append(ad.conv2d(ml, p[f"spatial.layer{l}.w"], p[f"spatial.layer{l}.b"], padding="valid"))
    return SpatialPriorMaps(maps)


def apply_modulation(x: Tensor, gamma_l, beta_l=None) -> Tensor:
    return ad.apply_modulation(x, gamma_l, beta_l)


def seg_forward(model: ModelBundle, image, gamma: Optional[ModulationParams] = None,
                priors: Optional[SpatialPriorMaps] = None) -> Tensor:
    """Logit map [N,1,H,W].  With gamma and priors both None the network runs unmodulated."""
    cfg = model.config
    x = _as_batch(image, channels=3)
    if x.ndim != 4 or x.shape[1] != 3:
        raise ShapeError(f"image must be [N,3,H,W], got {x.shape}")
    n, _, h, w = x.shape
    if h % (2 ** cfg.n_pools) or w % (2 ** cfg.n_pools):
        raise ShapeError(f"input {h}x{w} not divisible by {2 ** cfg.n_pools}")
    if not cfg.use_visual:
        gamma = None
    if not cfg.use_spatial:
        priors = None
    modulate = gamma is not None or priors is not None
    ones = None
    p = model.params
    stages = cfg.conv_stage()
    feat, sides = x, []
    for i, stage in enumerate(stages):
        if i > 0 and stage != stages[i - 1]:
            feat = ad.maxpool2(feat)
        feat = ad.conv2d(feat, p[f"segnet.conv{i}.w"], p[f"segnet.conv{i}.b"])
        mod = modulate and i >= cfg.skip_first
        if mod:
            l = i - cfg.skip_first
            if gamma is not None:
                g = gamma.layer(l)
            else:
                ones = ones if ones is not None else {}
                g = ones.setdefault(l, Tensor(np.ones(feat.shape[1])))
            b = priors.maps[l] if priors is not None else None
            if b is not None and b.shape[2:] != feat.shape[2:]:
                raise ShapeError(f"prior map {b.shape} does not match layer {i} features {feat.shape}")
        if mod and cfg.modulate_before_relu:
            feat = ad.apply_modulation(feat, g, b)
        feat = ad.relu(feat)
        if mod and not cfg.modulate_before_relu:
            feat = ad.apply_modulation(feat, g, b)
        last_in_stage = i == len(stages) - 1 or stages[i + 1] != stage
        if last_in_stage and stage >= cfg.side_from_stage:
            side = ad.conv2d(feat, p[f"segnet.side{stage}.w"], p[f"segnet.side{stage}.b"], padding="valid")
            sides.append(ad.bilinear_resize(side, h, w))
    fused = sides[0] if len(sides) == 1 else ad.concat(sides, axis=1)
    return ad.conv2d(fused, p["segnet.fuse.w"], p["segnet.fuse.b"], padding="valid")


def modulated_forward(model: ModelBundle, image, visual_guide, heatmap) -> Tensor:
    """Convenience: both modulators then the segmentation network."""
    gamma = visual_modulate(model, visual_guide) if model.config.use_visual else None
    priors = spatial_modulate(model, heatmap) if model.config.use_spatial else None
    return seg_forward(model, image, gamma, priors)
