import numpy as np
import pytest

from micap.encoder import TAP_COUNT, EncoderConfig, build_encoder, encode
from micap.gradcheck import check_parameters
from micap.tensor import Tensor


def test_desk_config_grid_and_tap_shapes():
    cfg = EncoderConfig()
    assert cfg.grid == 2 and cfg.out_channels == 128
    fm = encode(build_encoder(cfg, 0), np.zeros((2, 3, 64, 64), np.float32), tap=5)
    assert fm.tensor.shape == (2, 128, 2, 2)
    sides = [cfg.tap_shape(t)[1] for t in range(1, TAP_COUNT + 1)]
    assert sides == [16, 16, 8, 4, 2]


def test_full_size_config_grid():
    cfg = EncoderConfig.resnet18()
    assert cfg.grid == 7 and cfg.out_channels == 512


def test_same_seed_same_parameter_bytes(tiny_encoder):
    a, b = build_encoder(tiny_encoder, 3), build_encoder(tiny_encoder, 3)
    sa, sb = a.state_dict(), b.state_dict()
    assert all(sa[k].tobytes() == sb[k].tobytes() for k in sa)
    c = build_encoder(tiny_encoder, 4).state_dict()
    assert any(sa[k].tobytes() != c[k].tobytes() for k in sa if k.endswith("weight"))


def test_identical_images_identical_features_in_eval(tiny_encoder, rng):
    enc = build_encoder(tiny_encoder, 0).eval()
    img = rng.random((1, 3, 32, 32)).astype(np.float32)
    fm = encode(enc, np.concatenate([img, img, rng.random((1, 3, 32, 32)).astype(np.float32)]), pool=True)
    assert np.array_equal(fm.pooled.data[0], fm.pooled.data[1])


def test_shallower_taps_are_spatially_larger():
    cfg = EncoderConfig()
    assert cfg.tap_shape(1)[1] > cfg.tap_shape(5)[1]


def test_input_validation(tiny_encoder):
    enc = build_encoder(tiny_encoder, 0)
    with pytest.raises(ValueError):
        encode(enc, np.zeros((1, 3, 30, 30), np.float32))
    with pytest.raises(ValueError):
        encode(enc, np.zeros((1, 3, 32, 32), np.float32), tap=6)
    with pytest.raises(ValueError):
        EncoderConfig(input_size=48).validate()


def test_encoder_parameter_gradients(tiny_encoder, rng):
    enc = build_encoder(tiny_encoder, 0, np.float64)
    x = Tensor(rng.random((2, 3, 32, 32)))
    c = Tensor(rng.standard_normal((2, 8, 1, 1)))
    err = check_parameters(lambda: (enc(x) * c).sum(), dict(enc.named_parameters()), 24,
                           np.random.default_rng(0), eps=1e-6)
    assert err < 1e-4
