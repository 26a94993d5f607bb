import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from domainmap import tensor_core as tc
from domainmap.models import FULL_EDSR, FULL_RCAN, ModelConfig, ResBlock, RCAB, build, build_edsr, build_rcan
from domainmap.tensor_core import Tensor


def conv_params(cin, cout, k):
    return cout * cin * k * k + cout


def rcan_count(g, b, c, r, scale, k=3, cin=3):
    rcab = 2 * conv_params(c, c, k) + conv_params(c, c // r, 1) + conv_params(c // r, c, 1)
    group = b * rcab + conv_params(c, c, k)
    ups = {1: 0, 2: 1, 4: 2}[scale] * conv_params(c, 4 * c, k)
    return conv_params(cin, c, k) + g * group + conv_params(c, c, k) + ups + conv_params(c, cin, k)


def edsr_count(b, c, scale, k=3, cin=3):
    ups = {1: 0, 2: 1, 4: 2}[scale] * conv_params(c, 4 * c, k)
    return conv_params(cin, c, k) + b * 2 * conv_params(c, c, k) + conv_params(c, c, k) + ups + conv_params(c, cin, k)


@settings(max_examples=15, deadline=None)
@given(g=st.integers(1, 3), b=st.integers(1, 3), r=st.sampled_from([1, 2, 4]), scale=st.sampled_from([1, 2, 4]))
def test_rcan_parameter_count(g, b, r, scale):
    cfg = ModelConfig(n_groups=g, n_blocks_per_group=b, channels=8, reduction=r, scale=scale)
    assert build_rcan(cfg).num_parameters() == rcan_count(g, b, 8, r, scale)


def test_full_size_configs_count():
    assert FULL_RCAN.n_groups == 10 and FULL_RCAN.n_blocks_per_group == 8 and FULL_RCAN.channels == 64
    # hand-summed: 10 groups of 632,416 + head 1,792 + trunk 36,928 + upsampler 295,424 + tail 1,731
    assert rcan_count(10, 8, 64, 16, 4) == 6_660_035
    assert edsr_count(8, 64, 4) == 926_723
    assert FULL_EDSR.variant == "edsr"


def test_edsr_parameter_count():
    cfg = ModelConfig(n_blocks_per_group=3, channels=8, scale=2, variant="edsr")
    assert build_edsr(cfg).num_parameters() == edsr_count(3, 8, 2)


@pytest.mark.parametrize("scale", [1, 2, 4])
def test_output_shape_and_dtype(scale):
    m = build(ModelConfig(scale=scale, channels=8, reduction=2, n_groups=1, n_blocks_per_group=1))
    x = Tensor(np.random.default_rng(0).random((2, 3, 6, 5)).astype(np.float32))
    y = m(x)
    assert y.shape == (2, 3, 6 * scale, 5 * scale) and y.dtype == np.float32
    assert y.traced
    p = m.predict(x)
    assert not p.traced and p.data.min() >= 0 and p.data.max() <= 1


def test_wrong_input_channels():
    with pytest.raises(tc.ShapeError):
        build(ModelConfig())(Tensor(np.zeros((1, 1, 8, 8), np.float32)))


def test_same_seed_same_weights():
    a, b = build(ModelConfig(), seed=3), build(ModelConfig(), seed=3)
    for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert ka == kb
        np.testing.assert_array_equal(va, vb)
    c = build(ModelConfig(), seed=4)
    assert not np.array_equal(a.state_dict()["head.weight"], c.state_dict()["head.weight"])


def test_state_dict_round_trip():
    a, b = build(ModelConfig(), seed=1), build(ModelConfig(), seed=2)
    b.load_state_dict(a.state_dict())
    x = Tensor(np.random.default_rng(0).random((1, 3, 8, 8)).astype(np.float32))
    np.testing.assert_array_equal(a.predict(x).data, b.predict(x).data)
    with pytest.raises(KeyError):
        b.load_state_dict({"head.weight": a.state_dict()["head.weight"]})


def test_channel_attention_gate_in_unit_interval():
    m = build(ModelConfig())
    x = Tensor(np.random.default_rng(0).random((2, 16, 5, 5)).astype(np.float32))
    for att in m.gates():
        gate = att.gate(x).data
        assert gate.shape == (2, 16, 1, 1)
        assert np.all((gate > 0) & (gate < 1))


def test_rcab_with_unit_gate_equals_edsr_block():
    rng = np.random.default_rng(0)
    rcab = RCAB(8, 3, 2, 1.0, rng)
    res = ResBlock(8, 3, 1.0, np.random.default_rng(99))
    res.conv1.weight.data, res.conv1.bias.data = rcab.conv1.weight.data, rcab.conv1.bias.data
    res.conv2.weight.data, res.conv2.bias.data = rcab.conv2.weight.data, rcab.conv2.bias.data
    rcab.attention.force_gate = 1.0
    x = Tensor(rng.random((1, 8, 6, 6)).astype(np.float32))
    np.testing.assert_array_equal(rcab(x).data, res(x).data)


def test_channel_gate_rescales_channels():
    rng = np.random.default_rng(0)
    blk = RCAB(4, 3, 2, 1.0, rng)
    x = Tensor(rng.random((1, 4, 5, 5)))
    inner = blk.conv2(tc.relu(blk.conv1(x))).data
    gate = blk.attention.gate(Tensor(inner)).data
    np.testing.assert_allclose(blk(x).data, x.data + inner * gate, rtol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_full_model_gradients(seed):
    m = build(ModelConfig(), seed=seed).astype(np.longdouble)
    rng = np.random.default_rng(seed)
    x = Tensor(rng.random((1, 3, 6, 6)), dtype=np.longdouble)
    r = rng.normal(size=(1, 3, 12, 12))
    names = list(m.parameters())

    inputs = [x] + [Tensor(p.data, dtype=np.longdouble) for p in m.parameters().values()]
    err = tc.grad_check(lambda xi, *ps: tc.total(tc.mul(_run(m, names, xi, ps), Tensor(r))), inputs,
                        eps=1e-5, max_per_input=4, seed=seed, dtype=np.longdouble)
    assert err < 1e-3


def _run(m, names, x, ps):
    m.bind_parameters(dict(zip(names, ps)))
    return m(x)


def test_invalid_configs():
    with pytest.raises(ValueError):
        ModelConfig(channels=10, reduction=4)
    with pytest.raises(ValueError):
        ModelConfig(scale=3)
    with pytest.raises(ValueError):
        ModelConfig(variant="srcnn")
