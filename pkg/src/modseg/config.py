"""Run configuration: ``key = value`` files with dotted section keys.

Example::

    # comment
    seed = 3
    model.skip_first = 2
    model.stage_channels = 16, 16, 32, 32, 64, 64
    train.static_lr = 1e-3

Precedence is defaults < file < command-line overrides.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .dataio import SyntheticSpec
from .errors import ConfigError
from .modnet import ModConfig
from .training import TrainConfig


@dataclass
class DataConfig:
    train: str = ""
    test: str = ""
    guides: str = ""


@dataclass
class RunConfig:
    model: ModConfig = field(default_factory=ModConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0
    out: str = ""

    SECTIONS = ("model", "train", "synthetic", "data")

    def set(self, key: str, raw: str) -> None:
        parts = key.strip().split(".")
        if len(parts) == 1:
            target, name = self, parts[0]
        elif len(parts) == 2 and parts[0] in self.SECTIONS:
            target, name = getattr(self, parts[0]), parts[1]
        else:
            raise ConfigError(f"unknown config key {key!r}")
        fields = {f.name: f for f in dataclasses.fields(target)}
        if name not in fields or (target is self and name in self.SECTIONS):
            raise ConfigError(f"unknown config key {key!r}")
        current = getattr(target, name)
        setattr(target, name, _coerce(raw, current, key))

    def update(self, pairs: dict) -> "RunConfig":
        for k, v in pairs.items():
            self.set(k, v)
        return self

    def items(self, exclude: tuple = ("out",)) -> list:
        out = []
        for f in dataclasses.fields(self):
            if f.name in exclude:
                continue
            val = getattr(self, f.name)
            if dataclasses.is_dataclass(val):
                for g in dataclasses.fields(val):
                    out.append((f"{f.name}.{g.name}", getattr(val, g.name)))
            else:
                out.append((f.name, val))
        return out

    def dumps(self, exclude: tuple = ("out",)) -> str:
        return "".join(f"{k} = {format_value(v)}\n" for k, v in self.items(exclude))


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return "none"
    if isinstance(v, (tuple, list)):
        return ", ".join(format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _scalar(text: str, like, key: str):
    t = text.strip()
    if isinstance(like, bool):
        if t.lower() in ("true", "1", "yes", "on"):
            return True
        if t.lower() in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {text!r}")
    try:
        if isinstance(like, int):
            return int(t)
        if isinstance(like, float):
            return float(t)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {text!r}") from exc
    return t


def _guess(t: str):
    for conv in (int, float):
        try:
            return conv(t)
        except ValueError:
            pass
    return t


def _coerce(raw, current, key: str):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    if text.lower() == "none":
        return None
    if isinstance(current, (tuple, list)) or (current is None and "," in text):
        body = text.strip("()[] ")
        items = [s for s in body.split(",") if s.strip()]
        like = current[0] if current else None
        return tuple(_scalar(s, like, key) if like is not None else _guess(s.strip()) for s in items)
    if current is None:
        return _guess(text)
    return _scalar(text, current, key)


def parse_config_text(text: str) -> dict:
    pairs = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value', got {line!r}")
        k, v = line.split("=", 1)
        pairs[k.strip()] = v.strip()
    return pairs


def load_config(path: Optional[str] = None, overrides: Optional[dict] = None,
                base: Optional[RunConfig] = None) -> RunConfig:
    cfg = base or RunConfig()
    if path:
        p = Path(path)
        if not p.is_file():
            raise FileNotFoundError(f"config file not found: {p}")
        cfg.update(parse_config_text(p.read_text()))
    if overrides:
        cfg.update(overrides)
    return cfg


def desk_benchmark() -> RunConfig:
    """Settings of the desk-scale synthetic benchmark (toy network trained from scratch).

    The reference learning rates assume an ImageNet-pretrained backbone; a
    randomly initialized toy network needs far larger steps.
    """
    cfg = RunConfig()
    cfg.train = TrainConfig(static_epochs=4, static_lr=1e-3, static_epochs2=1, static_lr2=3e-4,
                            video_epochs=2, video_lr=3e-4, oneshot_lr=1e-4, batch_size=4)
    cfg.synthetic = SyntheticSpec(n_sequences=40)
    cfg.data = DataConfig(train="data/train", test="data/test")
    return cfg
