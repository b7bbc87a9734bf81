import json
import struct

import numpy as np
import pytest

from stimswin.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from stimswin.swin import TINY, ModelConfig, init_params
from stimswin.tensor import Rng
from stimswin.training import OptimizerState


def meta(model=TINY):
    return {"run": {"mode": "vst"}, "model": model.to_dict()}


@pytest.fixture
def params():
    return init_params(TINY, Rng(4))


def test_roundtrip_bit_exact(tmp_path, params):
    save_checkpoint(tmp_path / "a.ckpt", meta(), params)
    cfg, back, opt = load_checkpoint(tmp_path / "a.ckpt")
    assert cfg == meta() and opt is None
    assert set(back) == set(params)
    for k in params:
        assert back[k].data.tobytes() == params[k].data.tobytes()


def test_layout(tmp_path, params):
    save_checkpoint(tmp_path / "a.ckpt", meta(), params)
    raw = (tmp_path / "a.ckpt").read_bytes()
    (n,) = struct.unpack("<Q", raw[:8])
    header = json.loads(raw[8:8 + n])
    first = header["tensors"][0]
    arr = params[first["name"]].data
    blob = raw[8 + n + first["offset"]:8 + n + first["offset"] + arr.nbytes]
    assert blob == arr.astype("<f4").tobytes()
    assert len(raw) == 8 + n + sum(p.data.size * 4 for p in params.values())


def test_strip_projection_and_optimizer(tmp_path, trained_vst_l, params):
    _, vst_l_params, _, _ = trained_vst_l
    opt = OptimizerState.zeros(vst_l_params)
    opt.step = 12
    save_checkpoint(tmp_path / "full.ckpt", meta(), vst_l_params, opt_state=opt)
    save_checkpoint(tmp_path / "lean.ckpt", meta(), vst_l_params, inference_only=True, opt_state=opt)
    save_checkpoint(tmp_path / "vst.ckpt", meta(), params)
    _, full, full_opt = load_checkpoint(tmp_path / "full.ckpt")
    _, lean, lean_opt = load_checkpoint(tmp_path / "lean.ckpt")
    _, vst, _ = load_checkpoint(tmp_path / "vst.ckpt")
    assert "proj.w" in full and full_opt.step == 12 and set(full_opt.m) == set(vst_l_params)
    assert set(lean) == set(vst) and lean_opt is None


def test_embed_dim_mismatch(tmp_path, params):
    save_checkpoint(tmp_path / "a.ckpt", meta(), params)
    with pytest.raises(CheckpointError, match="differs"):
        load_checkpoint(tmp_path / "a.ckpt", expect_model=ModelConfig(embed_dim=32))


def test_shape_mismatch_against_header_model(tmp_path, params):
    save_checkpoint(tmp_path / "a.ckpt", meta(ModelConfig(embed_dim=32)), params)
    with pytest.raises(CheckpointError, match="shape"):
        load_checkpoint(tmp_path / "a.ckpt")


def test_unknown_and_missing_names(tmp_path, params):
    extra = dict(params, **{"bogus.w": params["head.b"]})
    save_checkpoint(tmp_path / "a.ckpt", meta(), extra)
    with pytest.raises(CheckpointError, match="unknown"):
        load_checkpoint(tmp_path / "a.ckpt")
    fewer = {k: v for k, v in params.items() if k != "head.b"}
    save_checkpoint(tmp_path / "b.ckpt", meta(), fewer)
    with pytest.raises(CheckpointError, match="missing"):
        load_checkpoint(tmp_path / "b.ckpt")


@pytest.mark.parametrize("corrupt, message", [
    (lambda raw: raw[:5], "truncated"),
    (lambda raw: struct.pack("<Q", 10 ** 9) + raw[8:], "exceeds"),
    (lambda raw: raw + b"\0\0\0\0", "trailing"),
    (lambda raw: raw[:-4], "layout"),
    (lambda raw: raw[:8] + b"x" + raw[9:], "header"),
])
def test_corrupt_files(tmp_path, params, corrupt, message):
    save_checkpoint(tmp_path / "a.ckpt", meta(), params)
    path = tmp_path / "a.ckpt"
    path.write_bytes(corrupt(path.read_bytes()))
    with pytest.raises(CheckpointError, match=message):
        load_checkpoint(path)


def test_config_needs_model(tmp_path, params):
    with pytest.raises(CheckpointError):
        save_checkpoint(tmp_path / "a.ckpt", {"run": {}}, params)
