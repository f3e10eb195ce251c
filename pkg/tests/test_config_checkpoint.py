import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from modseg.autodiff import Adam
from modseg.checkpoint import MAGIC, read_checkpoint, write_checkpoint
from modseg.config import RunConfig, desk_benchmark, load_config, parse_config_text
from modseg.errors import ConfigError, DataIOError
from modseg.modnet import ModConfig, init_model

SMALL = ModConfig(stage_channels=(4, 4, 6, 6, 8, 8), visual_channels=(3, 3, 4, 4, 4, 4), guide_resolution=16,
                  fusion_channels=4, input_sizes=(16, 24))


def param_bytes(model):
    return {k: v.data.tobytes() for k, v in model.params.items()}


# ------------------------------------------------------------------ checkpoint

@settings(max_examples=5, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_roundtrip_bitwise(tmp_path_factory, seed):
    path = tmp_path_factory.mktemp("ck") / "m.ckpt"
    m = init_model(SMALL, seed=seed % 1000)
    rng = np.random.default_rng(seed)
    for p in m.params.values():
        p.data[...] = rng.standard_normal(p.shape)
    cfg = RunConfig(model=SMALL, seed=7)
    write_checkpoint(path, m, cfg, meta={"stage": "static", "steps": 12})
    ck = read_checkpoint(path)
    assert param_bytes(ck.model) == param_bytes(m)
    assert list(ck.model.params) == list(m.params)
    assert ck.config.model == SMALL and ck.config.seed == 7
    assert ck.meta == {"stage": "static", "steps": "12"}
    again = path.with_name("again.ckpt")
    write_checkpoint(again, ck.model, ck.config, meta=ck.meta)
    assert again.read_bytes() == path.read_bytes()


def test_layout(tmp_path):
    m = init_model(SMALL, seed=0)
    write_checkpoint(tmp_path / "m.ckpt", m)
    blob = (tmp_path / "m.ckpt").read_bytes()
    header, _, _ = blob.partition(b"\nend ")
    lines = header.decode().splitlines()
    assert lines[0] == MAGIC
    params = [l.split() for l in lines if l.startswith("param ")]
    assert [p[1] for p in params] == list(m.params)
    offset = 0
    for (_, name, shape, off, count), t in zip(params, m.params.values()):
        assert int(off) == offset and int(count) == t.data.size
        assert shape == ",".join(map(str, t.shape))
        offset += 4 * t.data.size
    assert len(blob) == blob.index(b"\n", blob.index(b"\nend ") + 1) + 1 + offset + 8


def test_adam_state_roundtrip(tmp_path):
    m = init_model(SMALL, seed=1)
    opt = Adam(m.trainable(), lr=1e-3)
    for p in m.params.values():
        p.grad = np.ones_like(p.data)
    opt.step()
    write_checkpoint(tmp_path / "m.ckpt", m, adam=opt.state)
    st_ = read_checkpoint(tmp_path / "m.ckpt").adam
    assert st_.t == 1 and st_.lr == 1e-3
    for k in opt.state.m:
        assert st_.m[k].tobytes() == opt.state.m[k].astype(np.float32).tobytes()


def test_truncated_and_corrupt(tmp_path):
    path = tmp_path / "m.ckpt"
    write_checkpoint(path, init_model(SMALL, seed=0))
    blob = path.read_bytes()
    path.write_bytes(blob[:-20])
    with pytest.raises(DataIOError, match="truncated"):
        read_checkpoint(path)
    flipped = bytearray(blob)
    flipped[-30] ^= 1
    path.write_bytes(bytes(flipped))
    with pytest.raises(DataIOError, match="checksum"):
        read_checkpoint(path)
    path.write_bytes(b"hello\nend 0\n")
    with pytest.raises(DataIOError):
        read_checkpoint(path)
    with pytest.raises(DataIOError):
        read_checkpoint(tmp_path / "missing.ckpt")


# ------------------------------------------------------------------ config

def test_defaults_file_flags_precedence(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("# comment\nseed = 3\ntrain.static_lr = 1e-3\nmodel.skip_first = 2  # trailing\n")
    cfg = load_config(str(p), {"train.static_lr": "1e-05"})
    assert cfg.seed == 3 and cfg.model.skip_first == 2
    assert cfg.train.static_lr == 1e-5
    assert cfg.train.video_lr == RunConfig().train.video_lr


def test_dump_parse_roundtrip():
    cfg = desk_benchmark()
    cfg.model = dataclasses.replace(cfg.model, input_sizes=(32, 48))
    back = RunConfig().update(parse_config_text(cfg.dumps()))
    assert back.dumps() == cfg.dumps()
    assert back.train == cfg.train and back.model == cfg.model and back.synthetic == cfg.synthetic


def test_section_named_field():
    cfg = RunConfig().update({"data.train": "a/b", "train.batch_size": "8", "model.use_visual": "false"})
    assert cfg.data.train == "a/b" and cfg.train.batch_size == 8 and cfg.model.use_visual is False


@pytest.mark.parametrize("pairs", [{"nope": "1"}, {"model.nope": "1"}, {"train": "1"}, {"a.b.c": "1"},
                                   {"seed": "x"}, {"model.use_visual": "maybe"}])
def test_bad_keys_and_values(pairs):
    with pytest.raises(ConfigError):
        RunConfig().update(pairs)


def test_bad_config_line():
    with pytest.raises(ConfigError, match="line 2"):
        parse_config_text("seed = 1\nnonsense\n")
