import numpy as np
import pytest

from irdepth.network import (
    BlockSpec,
    CheckpointError,
    ConfigError,
    DepthModel,
    ModelConfig,
    build_block,
    load_checkpoint,
    parameter_count,
    read_checkpoint_header,
    save_checkpoint,
)
from irdepth.tensor import DimensionError, Tensor


@pytest.fixture(scope="module")
def desk():
    return DepthModel(ModelConfig.desk(64, 64, seed=0))


def rand_input(seed=0, hw=(64, 64), n=1):
    return Tensor(np.random.default_rng(seed).uniform(0, 1, (n, 3, *hw)).astype(np.float32))


# -- blocks ---------------------------------------------------------------------


@pytest.mark.parametrize("kind", ["ir_a", "ir_b", "ir_c"])
def test_ir_blocks_preserve_shape(kind):
    spec = ModelConfig.desk().block_specs()[kind]
    block = build_block(spec, rng_seed=1)
    x = Tensor(np.random.default_rng(0).normal(size=(2, spec.in_channels, 8, 8)).astype(np.float32))
    assert block(x).shape == x.shape


@pytest.mark.parametrize("kind", ["ir_a", "ir_b", "ir_c"])
@pytest.mark.parametrize("scale", [0.2, 1.0])
def test_zero_weights_give_relu_identity(kind, scale):
    spec = BlockSpec(kind, 6, ModelConfig.desk().block_specs()[kind].widths, residual_scale=scale)
    block = build_block(spec, rng_seed=None, dtype=np.float64)
    x = Tensor(np.random.default_rng(1).normal(size=(1, 6, 5, 5)))
    np.testing.assert_array_equal(block(x).data, np.maximum(x.data, 0.0))


def test_reduction_a_halves_spatial_and_grows_channels():
    spec = BlockSpec("red_a", 16, (8, 8, 8, 8))
    out = build_block(spec, rng_seed=0)(Tensor(np.ones((1, 16, 16, 16), dtype=np.float32)))
    assert out.shape[2:] == (8, 8)
    assert out.shape[1] > 16 and out.shape[1] == spec.out_channels


def test_reduction_b_halves_spatial():
    spec = ModelConfig.desk().block_specs()["red_b"]
    out = build_block(spec, rng_seed=0)(Tensor(np.ones((1, spec.in_channels, 8, 8), dtype=np.float32)))
    assert out.shape == (1, spec.out_channels, 4, 4)


def test_block_budget_enforced():
    spec = BlockSpec("ir_a", 256, (64, 64, 64, 64, 96, 128))
    with pytest.raises(ConfigError):
        build_block(spec, max_params=1000)


@pytest.mark.parametrize(
    "args",
    [("nope", 4, (1,)), ("ir_b", 4, (1, 1)), ("ir_b", 4, (0, 1, 1, 1)), ("ir_b", 4, (1, 1, 1, 1), 0.0)],
)
def test_bad_block_spec(args):
    with pytest.raises(ConfigError):
        BlockSpec(*args)


# -- config ---------------------------------------------------------------------


def test_presets():
    assert ModelConfig.desk().repeats == (2, 1, 2)
    assert ModelConfig.paper().repeats == (10, 5, 10)
    assert ModelConfig() == ModelConfig.preset("desk")


@pytest.mark.parametrize("hw", [(60, 64), (8, 8), (64, 0)])
def test_indivisible_input_rejected(hw):
    with pytest.raises(ConfigError):
        ModelConfig(input_hw=hw)


def test_desk_width_cap():
    specs = ModelConfig.desk().block_specs()
    widest = max(max(s.widths + (s.in_channels, s.out_channels)) for s in specs.values())
    assert widest <= 64


def test_desk_parameter_count_by_hand():
    # widths after scaling by 0.028 with a floor of 8:
    # stem (8, 9); ir_a all 8; red_a (11, 8, 8, 11); ir_b all 8; red_b (8, 11, 8, 9, 8, 9, 9); ir_c all 8
    def conv(ci, co, kh, kw):
        return ci * co * kh * kw + co

    stem = conv(3, 8, 3, 3) + conv(8, 9, 3, 3)
    c = 9
    ir_a = conv(c, 8, 1, 1) * 3 + conv(8, 8, 3, 3) * 3 + conv(24, c, 1, 1)
    red_a = conv(c, 11, 3, 3) + conv(c, 8, 1, 1) + conv(8, 8, 3, 3) + conv(8, 11, 3, 3)
    c = 9 + 11 + 11
    ir_b = conv(c, 8, 1, 1) * 2 + conv(8, 8, 1, 7) + conv(8, 8, 7, 1) + conv(16, c, 1, 1)
    red_b = conv(c, 8, 1, 1) * 3 + conv(8, 11, 3, 3) + conv(8, 9, 3, 3) + conv(8, 9, 3, 3) + conv(9, 9, 3, 3)
    c = 31 + 11 + 9 + 9
    ir_c = conv(c, 8, 1, 1) * 2 + conv(8, 8, 1, 3) + conv(8, 8, 3, 1) + conv(16, c, 1, 1)
    encoder = stem + 2 * ir_a + red_a + ir_b + red_b + 2 * ir_c
    decoder = (
        conv(60 + 60, 32, 3, 3) + conv(32, 32, 3, 3)
        + conv(32 + 31, 32, 3, 3) + conv(32, 32, 3, 3)
        + conv(32 + 9, 16, 3, 3) + conv(16, 16, 3, 3)
        + conv(16 + 8, 16, 3, 3) + conv(16, 16, 3, 3)
        + conv(16, 1, 1, 1)
    )
    assert encoder + decoder == 103_363
    assert parameter_count(ModelConfig.desk()) == 103_363
    assert DepthModel(ModelConfig.desk()).num_parameters() == 103_363


def test_parameter_count_is_pure():
    cfg = ModelConfig(repeats=(3, 2, 1), width_factor=0.05)
    assert parameter_count(cfg) == parameter_count(ModelConfig(repeats=(3, 2, 1), width_factor=0.05))
    assert parameter_count(cfg) == DepthModel(cfg).num_parameters()


# -- encoder / decoder ----------------------------------------------------------


def test_encode_shapes(desk):
    enc = desk.encode(rand_input())
    assert enc.bottleneck.shape[2:] == (4, 4)
    assert [s.shape[2] for s in enc.skips] == [32, 16, 8, 4]
    for a, b in zip(enc.skips, enc.skips[1:]):
        assert a.shape[2] == 2 * b.shape[2]


def test_encode_zero_input_finite(desk):
    enc = desk.encode(Tensor(np.zeros((1, 3, 64, 64), dtype=np.float32)))
    assert np.all(np.isfinite(enc.bottleneck.data))


def test_repeat_count_does_not_change_shapes():
    x = rand_input(hw=(32, 32))
    a = DepthModel(ModelConfig(repeats=(1, 1, 1), input_hw=(32, 32))).encode(x)
    b = DepthModel(ModelConfig(repeats=(2, 1, 1), input_hw=(32, 32))).encode(x)
    assert a.bottleneck.shape == b.bottleneck.shape
    assert [s.shape for s in a.skips] == [s.shape for s in b.skips]


def test_encode_rejects_wrong_shape(desk):
    with pytest.raises(DimensionError):
        desk.encode(rand_input(hw=(32, 32)))


def test_decode_output_half_resolution_in_unit_interval(desk):
    out = desk(rand_input(n=2))
    assert out.shape == (2, 1, 32, 32)
    assert np.all(out.data > 0) and np.all(out.data < 1)


def test_zero_head_gives_half(desk):
    model = desk.copy()
    model.head.weight.data[...] = 0
    model.head.bias.data[...] = 0
    np.testing.assert_array_equal(model(rand_input()).data, 0.5)
    np.testing.assert_array_equal(model.predict(rand_input()).data, 0.5)


def test_decode_skip_mismatch(desk):
    enc = desk.encode(rand_input())
    enc.skips[0] = Tensor(np.zeros((1, enc.skips[0].shape[1], 30, 30), dtype=np.float32))
    with pytest.raises(DimensionError):
        desk.decode(enc)


def test_predict_full_resolution(desk):
    out = desk.predict(rand_input())
    assert out.shape == (1, 1, 64, 64)
    assert np.all(out.data > 0) and np.all(out.data < 1)
    # 3-D input is accepted as a single image
    assert desk.predict(rand_input().data[0]).shape == (1, 1, 64, 64)


def test_predict_shape_mismatch(desk):
    with pytest.raises(DimensionError):
        desk.predict(rand_input(hw=(48, 48)))


def test_forward_deterministic():
    a = DepthModel(ModelConfig.desk(32, 32, seed=3))
    b = DepthModel(ModelConfig.desk(32, 32, seed=3))
    x = rand_input(hw=(32, 32))
    assert a(x).data.tobytes() == b(x).data.tobytes()


def test_full_scale_preset_builds():
    cfg = ModelConfig.paper()
    model = DepthModel(cfg)
    assert (len(model.ir_a), len(model.ir_b), len(model.ir_c)) == (10, 5, 10)
    assert model.num_parameters() == parameter_count(cfg)


# -- checkpoints ----------------------------------------------------------------


def test_checkpoint_round_trip(desk, tmp_path):
    path = tmp_path / "m.dfkt"
    save_checkpoint(desk, path)
    loaded = load_checkpoint(path)
    x = rand_input(5)
    assert loaded(x).data.tobytes() == desk(x).data.tobytes()
    assert loaded.config == desk.config
    header = read_checkpoint_header(path)
    assert header["parameter_count"] == desk.num_parameters()
    assert path.read_bytes().startswith(b"DFKT1")


def test_checkpoint_truncated(desk, tmp_path):
    path = tmp_path / "m.dfkt"
    save_checkpoint(desk, path)
    blob = path.read_bytes()
    for cut in (3, 8, len(blob) // 2, len(blob) - 1):
        path.write_bytes(blob[:cut])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)


def test_checkpoint_bad_magic_and_version(desk, tmp_path):
    path = tmp_path / "m.dfkt"
    save_checkpoint(desk, path)
    blob = path.read_bytes()
    path.write_bytes(b"XXXXX" + blob[5:])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    path.write_bytes(blob.replace(b'"version": 1', b'"version": 9'))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_missing_checkpoint_is_os_error(tmp_path):
    with pytest.raises(OSError):
        load_checkpoint(tmp_path / "absent.dfkt")
