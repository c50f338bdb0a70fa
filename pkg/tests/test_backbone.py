import numpy as np
import pytest

from espt.backbone import (
    BackboneConfig,
    BlockSpec,
    ConfigError,
    Model,
    equivariant_config,
    forward,
    init_params,
    load_checkpoint,
    paper_config,
    save_checkpoint,
    toy_config,
)
from espt.transforms import rotate_feature_map, rotate_image


def test_init_deterministic():
    cfg = toy_config()
    a = init_params(cfg, seed=3)
    b = init_params(cfg, seed=3)
    assert a.keys() == b.keys()
    for name in a:
        np.testing.assert_array_equal(a[name].data, b[name].data)
    c = init_params(cfg, seed=4)
    assert not np.array_equal(a["b0.conv0.w"].data, c["b0.conv0.w"].data)


def test_paper_preset_parameter_shapes():
    cfg = paper_config()
    params = init_params(cfg, seed=0)
    assert params["b0.conv0.w"].shape == (64, 3, 3, 3)
    assert params["b1.conv0.w"].shape == (160, 64, 3, 3)
    assert params["b2.conv2.w"].shape == (320, 320, 3, 3)
    assert params["b3.conv0.w"].shape == (640, 320, 3, 3)
    assert params["b3.proj.w"].shape == (640, 320, 1, 1)
    assert params["temperature"].shape == ()
    assert cfg.output_side == 5 and cfg.output_dim == 640


def test_paper_preset_forward_shape_and_rescale():
    cfg_raw = BackboneConfig(blocks=paper_config().blocks, input_size=84,
                             in_channels=3, rescale=False)
    params = init_params(cfg_raw, seed=1, dtype=np.float32)
    images = np.random.default_rng(0).normal(size=(3, 3, 84, 84)).astype(np.float32)
    raw = forward(params, images, cfg_raw)
    assert raw.shape == (3, 5, 5, 640)
    cfg_rescaled = BackboneConfig(blocks=cfg_raw.blocks, input_size=84,
                                  in_channels=3, rescale=True)
    scaled = forward(params, images, cfg_rescaled)
    factor = np.asarray(1.0 / np.sqrt(640), dtype=raw.data.dtype)
    np.testing.assert_array_equal(scaled.data, raw.data * factor)
    assert abs(1.0 / np.sqrt(640) - 0.039528) < 1e-6


def test_toy_preset_output_shape():
    cfg = toy_config()
    params = init_params(cfg, seed=2)
    out = forward(params, np.zeros((2, 1, 16, 16)), cfg)
    assert out.shape == (2, 4, 4, 16)


def test_zero_input_zero_shift_gives_zero_features():
    cfg = toy_config()
    params = init_params(cfg, seed=5)
    out = forward(params, np.zeros((3, 1, 16, 16)), cfg)
    np.testing.assert_array_equal(out.data, np.zeros_like(out.data))


def test_output_side_law():
    for blocks, side in [((8,), 12), ((4, 8), 20), ((4, 4, 8), 24)]:
        cfg = BackboneConfig(
            blocks=tuple(BlockSpec(f, convs=1) for f in blocks),
            input_size=side, in_channels=1)
        assert cfg.output_side == side // 2 ** len(blocks)
        params = init_params(cfg, seed=0)
        out = forward(params, np.ones((1, 1, side, side)), cfg)
        assert out.shape == (1, cfg.output_side, cfg.output_side, blocks[-1])


def test_overpooled_input_rejected():
    with pytest.raises(ConfigError, match="pools away"):
        BackboneConfig(blocks=tuple(BlockSpec(4) for _ in range(4)),
                       input_size=8, in_channels=1)


def test_odd_sides_floor_through_pooling():
    cfg = BackboneConfig(blocks=(BlockSpec(4, convs=1), BlockSpec(8, convs=1)),
                         input_size=18, in_channels=1)
    assert cfg.output_side == 4  # 18 -> 9 -> 4
    params = init_params(cfg, seed=0)
    out = forward(params, np.random.default_rng(0).normal(size=(1, 1, 18, 18)), cfg)
    assert out.shape == (1, 4, 4, 8)


def test_even_kernel_rejected():
    with pytest.raises(ConfigError, match="odd"):
        BackboneConfig(blocks=(BlockSpec(4, kernel=2),), input_size=8, in_channels=1)


def test_input_shape_mismatch_rejected():
    cfg = toy_config()
    params = init_params(cfg, seed=0)
    with pytest.raises(ValueError, match="does not match"):
        forward(params, np.zeros((1, 1, 8, 8)), cfg)
    with pytest.raises(ValueError, match="does not match"):
        forward(params, np.zeros((1, 3, 16, 16)), cfg)


@pytest.mark.parametrize("turns", [1, 2, 3])
def test_exact_rotation_equivariance_with_1x1_kernels(turns):
    cfg = equivariant_config()
    params = init_params(cfg, seed=9)
    images = np.random.default_rng(10).normal(size=(4, 1, 16, 16))
    feats_then_rotate = rotate_feature_map(forward(params, images, cfg), turns)
    rotated = rotate_image(np.ascontiguousarray(images), turns)
    rotate_then_feats = forward(params, rotated.data, cfg)
    np.testing.assert_allclose(
        feats_then_rotate.data, rotate_then_feats.data, atol=1e-6)


def test_checkpoint_roundtrip(tmp_path):
    cfg = toy_config()
    model = Model(cfg, init_params(cfg, seed=11), lam_bar=0.7,
                  extra={"note": "unit"})
    save_checkpoint(tmp_path / "ckpt", model)
    back = load_checkpoint(tmp_path / "ckpt")
    assert back.config == cfg
    assert back.lam_bar == 0.7
    assert back.extra == {"note": "unit"}
    assert back.params.keys() == model.params.keys()
    for name in model.params:
        np.testing.assert_array_equal(back.params[name].data, model.params[name].data)
        assert not back.params[name].requires_grad
    assert back.param_digest() == model.param_digest()
