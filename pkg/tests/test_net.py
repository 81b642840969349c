import json
import struct

import numpy as np
import pytest

from semirain.net import (
    MAGIC,
    ModelFormatError,
    ModelState,
    NetConfig,
    dumps_model,
    forward,
    init_model,
    load_model,
    loads_model,
    residual_branch,
    save_model,
)
from semirain.numerics import AdamState, Tape, Tensor, backward, square, sub, total


def random_model(config=NetConfig(), seed=0, scale=0.2):
    rng = np.random.default_rng(seed)
    params = [rng.normal(scale=scale, size=p.shape) for p in init_model(config, 0).params]
    return ModelState(config, params)


def test_identity_at_initialization():
    x = np.random.default_rng(0).random((3, 1, 12, 10))
    out = forward(init_model(NetConfig(), seed=4), x)
    assert out.data.tobytes() == x.tobytes()


def test_same_seed_same_params():
    a, b = init_model(NetConfig(), 11), init_model(NetConfig(), 11)
    for p, q in zip(a.params, b.params):
        assert p.tobytes() == q.tobytes()
    c = init_model(NetConfig(), 12)
    assert not np.array_equal(a.params[2], c.params[2])


def test_hidden_kernels_he_variance():
    model = init_model(NetConfig(layers=8, channels=32), seed=1)
    draws = np.concatenate([model.params[2 * i].ravel() for i in range(1, 7)])
    assert draws.size >= 10_000
    assert np.var(draws) == pytest.approx(2.0 / (32 * 9), rel=0.2)
    assert np.all(model.params[1] == 0)


def test_output_is_input_plus_branch():
    model = random_model(seed=2)
    x = np.random.default_rng(3).random((2, 1, 9, 11))
    g = residual_branch(model, x).data
    out = forward(model, x).data
    np.testing.assert_allclose(x - out, -g, atol=1e-12, rtol=0)


def test_constant_branch_shifts_output():
    # every hidden layer zero, last bias -0.1 -> g == -0.1 everywhere
    cfg = NetConfig(layers=3, channels=4)
    model = init_model(cfg, 0)
    params = [np.zeros_like(p) for p in model.params]
    params[-1] = np.array([-0.1])
    x = np.random.default_rng(1).random((1, 1, 6, 6))
    out = forward(ModelState(cfg, params), x).data
    np.testing.assert_allclose(out, x - 0.1, atol=1e-15)


def test_gradient_matches_finite_differences():
    cfg = NetConfig(layers=3, channels=3)
    model = random_model(cfg, seed=5, scale=0.3)
    rng = np.random.default_rng(6)
    x, y = rng.random((2, 1, 6, 6)), rng.random((2, 1, 6, 6))

    def loss_of(params):
        return float(((forward(ModelState(cfg, params), x).data - y) ** 2).sum())

    tape = Tape()
    grads = backward(tape, total(square(sub(forward(model, x, tape), Tensor(y)))))
    h = 1e-6
    rng2 = np.random.default_rng(7)
    for pi, p in enumerate(model.params):
        for _ in range(4):
            idx = tuple(rng2.integers(0, s) for s in p.shape)
            plus = [q.copy() for q in model.params]
            minus = [q.copy() for q in model.params]
            plus[pi][idx] += h
            minus[pi][idx] -= h
            num = (loss_of(plus) - loss_of(minus)) / (2 * h)
            assert abs(num - grads[pi][idx]) <= 1e-4 * max(1.0, abs(num))


@pytest.mark.parametrize("shape", [(1, 1, 3, 3), (4, 1, 17, 5)])
def test_output_shape(shape):
    assert forward(random_model(), np.zeros(shape)).shape == shape


@pytest.mark.parametrize("shape", [(1, 2, 8, 8), (8, 8), (1, 1, 2, 8)])
def test_bad_input_shape(shape):
    with pytest.raises(ValueError):
        forward(random_model(), np.zeros(shape))


@pytest.mark.parametrize("kw", [dict(layers=1), dict(channels=0), dict(kernel=4)])
def test_bad_config(kw):
    with pytest.raises(ValueError):
        NetConfig(**kw)


def test_wrong_param_shapes():
    with pytest.raises(ValueError):
        ModelState(NetConfig(layers=2, channels=2), [np.zeros((2, 1, 3, 3)), np.zeros(2)])


class TestSerialization:
    def model_with_adam(self):
        m = random_model(NetConfig(layers=4, channels=5), seed=9)
        rng = np.random.default_rng(1)
        m.adam = AdamState(17, [rng.normal(size=p.shape) for p in m.params],
                           [rng.random(p.shape) for p in m.params])
        m.epoch = 3
        return m

    def test_roundtrip_bit_exact(self, tmp_path):
        m = self.model_with_adam()
        save_model(m, tmp_path / "m.sdrn")
        back = load_model(tmp_path / "m.sdrn")
        assert back.config == m.config and back.epoch == 3 and back.adam.step == 17
        for group in ("params",):
            for a, b in zip(getattr(m, group), getattr(back, group)):
                assert a.tobytes() == b.tobytes()
        for a, b in zip(m.adam.m + m.adam.v, back.adam.m + back.adam.v):
            assert a.tobytes() == b.tobytes()
        assert dumps_model(back) == dumps_model(m)

    def test_magic(self):
        assert dumps_model(self.model_with_adam())[:4] == MAGIC == b"SDRN"

    def test_bad_magic(self):
        buf = bytearray(dumps_model(self.model_with_adam()))
        buf[:4] = b"XXXX"
        with pytest.raises(ModelFormatError, match="magic"):
            loads_model(bytes(buf))

    def test_unsupported_version(self):
        buf = bytearray(dumps_model(self.model_with_adam()))
        buf[4:8] = struct.pack("<I", 99)
        with pytest.raises(ModelFormatError, match="version"):
            loads_model(bytes(buf))

    def test_truncated_payload(self):
        buf = dumps_model(self.model_with_adam())
        with pytest.raises(ModelFormatError, match="length mismatch"):
            loads_model(buf[:-8])

    def test_header_layer_count_disagrees_with_payload(self):
        small = random_model(NetConfig(layers=3, channels=5))
        big = NetConfig(layers=4, channels=5)
        header = json.dumps({"config": {"layers": 4, "channels": 5, "kernel": 3}, "epoch": 0, "adamStep": 0,
                             "shapes": [list(s) for pair in big.layer_shapes() for s in pair]}).encode()
        payload = dumps_model(small)
        hlen = struct.unpack_from("<I", payload, 8)[0]
        buf = struct.pack("<4sII", MAGIC, 1, len(header)) + header + payload[12 + hlen:]
        with pytest.raises(ModelFormatError, match="length mismatch"):
            loads_model(buf)
