"""Single-file checkpoints.

A UTF-8 text header, a payload of little-endian float32 values, and an
8-byte little-endian checksum (64-bit BLAKE2b of the payload)::

    MODSEG-CHECKPOINT 1
    config model.skip_first = 2
    ...
    meta adam_t = 120
    param segnet.conv0.w 16,3,3,3 0 432
    ...
    end 123456
    <payload><checksum>

``param`` lines give name, shape, byte offset into the payload and element
count.  Optimizer moments are stored as extra ``adam.m/<name>`` and
``adam.v/<name>`` entries.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .autodiff import AdamState, Tensor
from .config import RunConfig, format_value
from .errors import DataIOError
from .modnet import ModelBundle, init_model

MAGIC = "MODSEG-CHECKPOINT 1"


def _digest(payload: bytes) -> bytes:
    return hashlib.blake2b(payload, digest_size=8).digest()


@dataclass
class Checkpoint:
    model: ModelBundle
    config: RunConfig
    meta: dict = field(default_factory=dict)
    adam: Optional[AdamState] = None


def write_checkpoint(path, model: ModelBundle, config: Optional[RunConfig] = None,
                     meta: Optional[dict] = None, adam: Optional[AdamState] = None) -> None:
    config = config or RunConfig(model=model.config)
    config.model = model.config
    entries = [(k, v.data) for k, v in model.params.items()]
    meta = dict(meta or {})
    if adam is not None:
        meta.update(adam_t=adam.t, adam_lr=adam.lr, adam_beta1=adam.beta1,
                    adam_beta2=adam.beta2, adam_eps=adam.eps)
        for k in model.params:
            if k in adam.m:
                entries.append((f"adam.m/{k}", adam.m[k]))
                entries.append((f"adam.v/{k}", adam.v[k]))
    lines = [MAGIC]
    lines += [f"config {k} = {format_value(v)}" for k, v in config.items(exclude=("out",))]
    lines += [f"meta {k} = {format_value(v)}" for k, v in meta.items()]
    chunks, offset = [], 0
    for name, arr in entries:
        if " " in name:
            raise ValueError(f"parameter name may not contain spaces: {name!r}")
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        shape = ",".join(str(s) for s in np.shape(arr)) or "-"
        lines.append(f"param {name} {shape} {offset} {np.size(arr)}")
        chunks.append(data)
        offset += len(data)
    lines.append(f"end {offset}")
    payload = b"".join(chunks)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(("\n".join(lines) + "\n").encode("utf-8"))
        f.write(payload)
        f.write(_digest(payload))


def read_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise DataIOError(path, f"cannot read checkpoint ({exc.strerror})") from exc
    pos, lines = 0, []
    while True:
        nl = blob.find(b"\n", pos)
        if nl < 0:
            raise DataIOError(path, "truncated header")
        line = blob[pos:nl].decode("utf-8")
        pos = nl + 1
        lines.append(line)
        if line.startswith("end "):
            break
    if lines[0] != MAGIC:
        raise DataIOError(path, "not a modseg checkpoint")
    size = int(lines[-1].split()[1])
    payload = blob[pos:pos + size]
    trailer = blob[pos + size:pos + size + 8]
    if len(payload) != size or len(trailer) != 8:
        raise DataIOError(path, "truncated payload")
    if trailer != _digest(payload):
        raise DataIOError(path, "checksum mismatch")

    cfg_pairs, meta, arrays = {}, {}, {}
    for line in lines[1:-1]:
        kind, rest = line.split(" ", 1)
        if kind == "config":
            k, v = rest.split("=", 1)
            cfg_pairs[k.strip()] = v.strip()
        elif kind == "meta":
            k, v = rest.split("=", 1)
            meta[k.strip()] = v.strip()
        elif kind == "param":
            name, shape, off, count = rest.split(" ")
            shp = () if shape == "-" else tuple(int(s) for s in shape.split(","))
            off, count = int(off), int(count)
            arrays[name] = np.frombuffer(payload, dtype="<f4", count=count, offset=off).reshape(shp)
        else:
            raise DataIOError(path, f"unknown header line {line!r}")

    config = RunConfig().update(cfg_pairs)
    model = init_model(config.model, seed=0)
    for name, t in model.params.items():
        if name not in arrays:
            raise DataIOError(path, f"missing parameter {name}")
        if arrays[name].shape != t.shape:
            raise DataIOError(path, f"parameter {name} has shape {arrays[name].shape}, expected {t.shape}")
        model.params[name] = Tensor(arrays[name].astype(np.float32), requires_grad=True, name=name)
    adam = None
    if "adam_t" in meta:
        adam = AdamState(lr=float(meta["adam_lr"]), beta1=float(meta["adam_beta1"]),
                         beta2=float(meta["adam_beta2"]), eps=float(meta["adam_eps"]), t=int(meta["adam_t"]))
        for name in model.params:
            if f"adam.m/{name}" in arrays:
                adam.m[name] = arrays[f"adam.m/{name}"].astype(np.float32)
                adam.v[name] = arrays[f"adam.v/{name}"].astype(np.float32)
    return Checkpoint(model, config, meta, adam)
