import io
import struct

import numpy as np
import pytest

from hmvgg.autograd import grad_check, reduce_sum
from hmvgg.errors import CheckpointError, ConfigError, ShapeError
from hmvgg.model import (ModelConfig, backbone_forward, checkpoint_bytes, hmvgg_forward, init_params,
                         is_buffer, learnable_names, load_checkpoint, param_shapes, parse_checkpoint,
                         save_checkpoint)

DESK = ModelConfig.desk()


@pytest.fixture(scope="module")
def desk_params():
    return init_params(DESK, 0)


def test_desk_pyramid_shapes(desk_params, rng):
    pyr = backbone_forward(rng.normal(size=(1, 3, 32, 32)), desk_params, DESK)
    assert pyr.R3.shape == (1, 16, 4, 4)
    assert pyr.R4.shape == (1, 32, 2, 2)
    assert pyr.R5.shape == (1, 32, 1, 1)


@pytest.mark.parametrize("h,w", [(64, 64), (64, 96), (96, 32)])
def test_pyramid_shapes_any_multiple_of_32(rng, h, w):
    cfg = ModelConfig.desk(input_size=(h, w))
    res = hmvgg_forward(rng.normal(size=(2, 3, h, w)), init_params(cfg, 1), cfg)
    assert res.pyramid.R3.shape == (2, 16, h // 8, w // 8)
    assert res.pyramid.R4.shape == (2, 32, h // 16, w // 16)
    assert res.pyramid.R5.shape == (2, 32, h // 32, w // 32)
    assert res.fusions[0].value.shape == (2, 32, h // 16, w // 16)
    assert res.fusions[1].value.shape == (2, 32, h // 8, w // 8)
    assert res.logits.shape == (2, 3)


def test_zero_input_is_finite_and_deterministic(desk_params):
    x = np.zeros((1, 3, 32, 32))
    a = hmvgg_forward(x, desk_params, DESK)
    b = hmvgg_forward(x, desk_params, DESK)
    for r in ("R3", "R4", "R5"):
        assert np.all(np.isfinite(a.activation(r).value))
        assert np.array_equal(a.activation(r).value, b.activation(r).value)


def test_eval_forward_is_pure(desk_params, rng):
    x = rng.normal(size=(3, 3, 32, 32))
    before = {k: v.copy() for k, v in desk_params.items()}
    a = hmvgg_forward(x, desk_params, DESK, "eval").logits.value
    b = hmvgg_forward(x, desk_params, DESK, "eval").logits.value
    assert a.shape == (3, 3)
    assert np.array_equal(a, b)
    assert all(np.array_equal(before[k], desk_params[k]) for k in before)


def test_train_forward_returns_new_buffers_without_mutating(desk_params, rng):
    before = {k: v.copy() for k, v in desk_params.items()}
    res = hmvgg_forward(rng.normal(size=(2, 3, 32, 32)), desk_params, DESK, "train")
    assert all(np.array_equal(before[k], desk_params[k]) for k in before)
    assert set(res.buffers) == {k for k in desk_params if is_buffer(k)}
    assert not np.array_equal(res.buffers["backbone.b1.c1.bn.running_mean"],
                              desk_params["backbone.b1.c1.bn.running_mean"])


def test_input_shape_checked(desk_params):
    with pytest.raises(ShapeError):
        hmvgg_forward(np.zeros((1, 3, 64, 64)), desk_params, DESK)
    with pytest.raises(ShapeError):
        hmvgg_forward(np.zeros((1, 1, 32, 32)), desk_params, DESK)


def test_six_channel_config(rng):
    cfg = ModelConfig.desk(input_channels=6)
    res = hmvgg_forward(rng.normal(size=(1, 6, 32, 32)), init_params(cfg, 0), cfg)
    assert res.logits.shape == (1, 3)


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(input_size=(100, 100))
    with pytest.raises(ConfigError):
        ModelConfig(widths=(1, 2, 3))
    with pytest.raises(ConfigError):
        ModelConfig(classes=1)
    with pytest.raises(ConfigError):
        ModelConfig.from_items({"colour": "1"})


def test_config_text_round_trip():
    cfg = ModelConfig.desk(input_channels=6, input_size=(64, 96), classes=4)
    assert ModelConfig.from_text(cfg.to_text()) == cfg


def test_param_layout_matches_architecture():
    shapes = param_shapes(ModelConfig())
    assert shapes["backbone.b1.c1.weight"] == (64, 3, 3, 3)
    assert shapes["backbone.b5.c3.weight"] == (512, 512, 3, 3)
    assert shapes["ham3.fc1.weight"] == (16, 256)
    assert shapes["ham5.fc2.weight"] == (512, 32)
    assert shapes["ham4.spatial.weight"] == (1, 512, 1, 1)
    assert shapes["lateral3.c1.weight"] == (512, 256, 3, 3)
    assert shapes["lateral3.c2.weight"] == (512, 512, 3, 3)
    assert shapes["mlrm2.fuse.weight"] == (512, 1536, 1, 1)
    assert shapes["global.weight"] == (512, 512, 1, 1)
    assert shapes["head.fc1.weight"] == (64, 512)
    assert shapes["head.fc2.weight"] == (3, 64)
    assert sum(1 for k in shapes if k.startswith("backbone") and k.endswith(".weight")) == 13


def test_init_deterministic_and_seed_sensitive():
    a, b, c = init_params(DESK, 5), init_params(DESK, 5), init_params(DESK, 6)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert not np.array_equal(a["backbone.b1.c1.weight"], c["backbone.b1.c1.weight"])


def test_init_values():
    params = init_params(DESK, 0)
    for name, arr in params.items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "weight":
            bound = np.sqrt(6.0 / np.prod(arr.shape[1:]))
            assert np.abs(arr).max() <= bound
        elif leaf in ("gamma", "running_var"):
            assert np.all(arr == 1)
        else:
            assert np.all(arr == 0)


def test_init_weight_mean_statistics():
    cfg = ModelConfig.desk(widths=(4, 8, 16, 36, 36))
    w = init_params(cfg, 3)["backbone.b5.c2.weight"]
    assert w.size >= 10_000
    bound = np.sqrt(6.0 / np.prod(w.shape[1:]))
    se = bound / np.sqrt(3.0) / np.sqrt(w.size)  # std of U(-b, b) is b / sqrt(3)
    assert abs(w.mean()) < 3 * se
    assert w.var() == pytest.approx(bound ** 2 / 3, rel=0.05)


def test_checkpoint_round_trip(tmp_path, desk_params, rng):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, DESK, desk_params)
    cfg, loaded = load_checkpoint(path)
    assert cfg == DESK
    assert list(loaded) == list(desk_params)
    assert all(np.array_equal(loaded[k], desk_params[k]) for k in loaded)
    x = rng.normal(size=(2, 3, 32, 32))
    assert np.array_equal(hmvgg_forward(x, loaded, cfg).logits.value, hmvgg_forward(x, desk_params, DESK).logits.value)
    assert path.read_bytes() == checkpoint_bytes(cfg, loaded)


def test_checkpoint_layout(desk_params):
    data = checkpoint_bytes(DESK, desk_params)
    f = io.BytesIO(data)
    assert f.read(4) == b"HMVK"
    version, tlen = struct.unpack("<II", f.read(8))
    assert version == 1
    assert ModelConfig.from_text(f.read(tlen).decode()) == DESK
    (count,) = struct.unpack("<I", f.read(4))
    assert count == len(desk_params)
    assert f.read(4) == b"HMT1"


def test_corrupt_checkpoints_rejected(desk_params, tmp_path):
    data = checkpoint_bytes(DESK, desk_params)
    with pytest.raises(CheckpointError):
        parse_checkpoint(b"XXXX" + data[4:])
    with pytest.raises(CheckpointError):
        parse_checkpoint(data[:-10])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.ckpt")


def test_learnable_names_exclude_buffers(desk_params):
    names = learnable_names(desk_params)
    assert "backbone.b1.c1.bn.gamma" in names
    assert not any(n.endswith(("running_mean", "running_var")) for n in names)


@pytest.mark.parametrize("name", ["ham4.fc2.weight", "mlrm1.fuse.weight", "global.weight",
                                  "lateral3.c2.bn.gamma", "head.fc1.bias", "ham3.spatial.bias"])
def test_parameter_gradients_through_full_model(desk_params, rng, name):
    x = rng.normal(size=(1, 3, 32, 32))
    w = rng.normal(size=(1, 3))

    def f(v):
        params = dict(desk_params)
        res = hmvgg_forward(v.tape.leaf(x, False), {**params, name: v.value}, DESK, "eval")
        # swap the bound leaf for v so the gradient flows to the probe variable
        return reduce_sum(res.logits * w)

    from hmvgg.autograd import Tape, backward, numeric_grad, relative_error
    tape = Tape()
    res = hmvgg_forward(tape.leaf(x, False), desk_params, DESK, "eval")
    grads = res.gradients(backward(tape, reduce_sum(res.logits * w)))
    num = numeric_grad(f, desk_params[name], 1e-6)
    assert relative_error(grads[name], num) < 1e-3
