import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cfnet.tensor_core import (
    CheckpointError,
    ConvSpec,
    ParamStore,
    ShapeError,
    add,
    avg_pool2,
    avg_pool2_backward,
    concat_channels,
    conv2d_backward,
    conv2d_forward,
    load_into_store,
    mul,
    prelu,
    prelu_backward,
    read_tensors,
    save_store,
    sigmoid,
    softplus,
    split_channels,
    upsample_nearest2,
    write_tensors,
)

from conftest import naive_conv


def test_conv_ones_closed_form():
    x = np.ones((1, 1, 3, 3))
    w = np.ones((1, 1, 3, 3))
    y = conv2d_forward(x, w, np.zeros(1), ConvSpec(1, 1, 3))
    np.testing.assert_array_equal(y[0, 0], [[4, 6, 4], [6, 9, 6], [4, 6, 4]])


def test_conv_identity_kernel(rng):
    x = rng.standard_normal((2, 3, 5, 5))
    w = np.zeros((3, 3, 3, 3))
    for c in range(3):
        w[c, c, 1, 1] = 1.0
    np.testing.assert_array_equal(conv2d_forward(x, w, np.zeros(3), ConvSpec(3, 3)), x)


@pytest.mark.parametrize("k,stride", [(3, 1), (1, 1), (3, 2)])
def test_conv_matches_naive_loops(rng, k, stride):
    x = rng.standard_normal((2, 3, 5, 5))
    w = rng.standard_normal((4, 3, k, k))
    b = rng.standard_normal(4)
    spec = ConvSpec(3, 4, k, stride)
    got = conv2d_forward(x, w, b, spec)
    want = naive_conv(x, w, b, k // 2, stride)
    assert got.shape == want.shape
    assert np.max(np.abs(got - want)) < 1e-12


def test_transposed_conv_is_adjoint_of_strided_conv(rng):
    x = rng.standard_normal((2, 3, 8, 8))
    w = rng.standard_normal((4, 3, 3, 3))
    y = rng.standard_normal((2, 4, 4, 4))
    down = conv2d_forward(x, w, None, ConvSpec(3, 4, 3, 2))
    # the transposed layer with weight (in=4, out=3) is the adjoint of the conv above
    up = conv2d_forward(y, w, None, ConvSpec(4, 3, 3, 2, transposed=True))
    assert up.shape == x.shape
    assert abs(np.sum(down * y) - np.sum(x * up)) < 1e-10


def test_conv_bias_grad_counts_positions(rng):
    x = rng.standard_normal((2, 3, 5, 5))
    w = rng.standard_normal((2, 3, 3, 3))
    spec = ConvSpec(3, 2)
    y = conv2d_forward(x, w, np.zeros(2), spec)
    _, _, gb = conv2d_backward(np.ones_like(y), x, w, spec)
    np.testing.assert_array_equal(gb, [50.0, 50.0])


def test_conv_zero_grad_gives_zero(rng):
    x = rng.standard_normal((1, 2, 4, 4))
    w = rng.standard_normal((3, 2, 3, 3))
    gx, gw, gb = conv2d_backward(np.zeros((1, 3, 4, 4)), x, w, ConvSpec(2, 3))
    assert not gx.any() and not gw.any() and not gb.any()


def test_conv_finite_difference_every_parameter(rng):
    x = rng.standard_normal((1, 2, 4, 4))
    w = rng.standard_normal((2, 2, 3, 3))
    b = rng.standard_normal(2)
    spec = ConvSpec(2, 2)
    r = rng.standard_normal((1, 2, 4, 4))
    _, gw, gb = conv2d_backward(r, x, w, spec)
    eps = 1e-4
    for arr, g in ((w, gw), (b, gb)):
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + eps
            fp = np.sum(conv2d_forward(x, w, b, spec) * r)
            arr[idx] = old - eps
            fm = np.sum(conv2d_forward(x, w, b, spec) * r)
            arr[idx] = old
            num = (fp - fm) / (2 * eps)
            assert abs(num - g[idx]) / max(abs(num), abs(g[idx]), 1e-6) < 1e-5


def test_conv_shape_errors(rng):
    x = rng.standard_normal((1, 2, 4, 4))
    with pytest.raises(ShapeError, match="weight"):
        conv2d_forward(x, np.zeros((3, 5, 3, 3)), None, ConvSpec(2, 3))
    with pytest.raises(ShapeError):
        conv2d_forward(x[0], np.zeros((3, 2, 3, 3)), None, ConvSpec(2, 3))
    w = rng.standard_normal((3, 2, 3, 3))
    with pytest.raises(ShapeError, match="grad_out"):
        conv2d_backward(np.zeros((1, 3, 5, 5)), x, w, ConvSpec(2, 3))


def test_convspec_validation():
    assert ConvSpec(1, 1, 1).padding == 0
    assert ConvSpec(1, 1, 3).padding == 1
    with pytest.raises(ValueError):
        ConvSpec(1, 1, 5)
    with pytest.raises(ValueError):
        ConvSpec(1, 1, 3, 1, padding=0)


def test_transposed_doubles_dims(rng):
    y = conv2d_forward(rng.standard_normal((1, 4, 3, 5)), rng.standard_normal((4, 2, 3, 3)), None,
                       ConvSpec(4, 2, 3, 2, transposed=True))
    assert y.shape == (1, 2, 6, 10)


def test_avg_pool():
    x = np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 1, 2, 2)
    assert avg_pool2(x)[0, 0, 0, 0] == 2.5
    np.testing.assert_array_equal(avg_pool2(np.full((1, 2, 4, 6), 3.0)), np.full((1, 2, 2, 3), 3.0))
    np.testing.assert_array_equal(avg_pool2_backward(np.ones((1, 1, 1, 1))), np.full((1, 1, 2, 2), 0.25))
    with pytest.raises(ShapeError):
        avg_pool2(np.zeros((1, 1, 3, 4)))


def test_pool_then_upsample_keeps_block_means(rng):
    x = rng.standard_normal((2, 3, 6, 8))
    np.testing.assert_allclose(avg_pool2(upsample_nearest2(avg_pool2(x))), avg_pool2(x), atol=1e-15)


def test_prelu():
    x = np.array([-2.0, 0.0, 3.0]).reshape(1, 1, 1, 3)
    np.testing.assert_array_equal(prelu(x, np.array([0.25])), [[[[-0.5, 0.0, 3.0]]]])
    _, ga = prelu_backward(np.ones_like(x), x, np.array([0.25]))
    np.testing.assert_array_equal(ga, [-2.0])
    with pytest.raises(ShapeError):
        prelu(x, np.array([0.25, 0.1]))


def test_sigmoid_and_softplus_stable():
    x = np.array([-800.0, -1.0, 0.0, 1.0, 800.0]).reshape(1, 1, 1, 5)
    s = sigmoid(x)
    assert s[0, 0, 0, 2] == 0.5
    assert np.all(np.isfinite(s)) and np.all(np.diff(s.ravel()) >= 0)
    sp = softplus(x)
    assert np.all(np.isfinite(sp)) and sp[0, 0, 0, -1] == 800.0


def test_elementwise_and_concat(rng):
    a = rng.standard_normal((1, 2, 3, 3))
    np.testing.assert_array_equal(add(a, np.zeros_like(a)), a)
    np.testing.assert_array_equal(mul(a, np.ones_like(a)), a)
    with pytest.raises(ShapeError):
        add(a, np.zeros((1, 2, 3, 4)))
    b = rng.standard_normal((1, 3, 3, 3))
    c = concat_channels(a, b)
    np.testing.assert_array_equal(c[:, :2], a)
    x, y = split_channels(c, 2)
    np.testing.assert_array_equal(x, a)
    np.testing.assert_array_equal(y, b)
    np.testing.assert_array_equal(concat_channels(a, np.zeros((1, 0, 3, 3))), a)
    with pytest.raises(ShapeError):
        concat_channels(a, np.zeros((1, 1, 2, 3)))


def test_param_store_sharing():
    s = ParamStore()
    p = s.add("a.w", np.ones((2, 2)))
    s.share("b.w", "a.w", group="g")
    assert s["b.w"] is p and s.aliases("a.w") == ["a.w", "b.w"]
    s["b.w"].value[0, 0] = 5.0
    assert s["a.w"].value[0, 0] == 5.0
    assert s.count() == 4 and len(s.unique()) == 1
    with pytest.raises(KeyError):
        s.add("a.w", np.zeros(1))


def test_checkpoint_container_roundtrip(tmp_path):
    s = ParamStore()
    s.add("w", np.arange(24.0).reshape(2, 3, 2, 2))
    s.add("b", np.array([1.5, -2.0]))
    path = tmp_path / "m.cfn"
    save_store(path, s)
    raw = path.read_bytes()
    assert raw[:4] == b"CFN1"
    # first entry: u32 name length, name, 4 x u32 dims
    assert int.from_bytes(raw[4:8], "little") == 1 and raw[8:9] == b"w"
    assert [int.from_bytes(raw[9 + 4 * i : 13 + 4 * i], "little") for i in range(4)] == [2, 3, 2, 2]
    with open(path, "rb") as fh:
        t = read_tensors(fh)
    assert t["b"].shape == (2, 1, 1, 1)
    s2 = ParamStore()
    s2.add("w", np.zeros((2, 3, 2, 2)))
    s2.add("b", np.zeros(2))
    load_into_store(t, s2)
    np.testing.assert_array_equal(s2["w"].value, s["w"].value)


def test_checkpoint_errors():
    with pytest.raises(CheckpointError):
        read_tensors(io.BytesIO(b"NOPE"))
    buf = io.BytesIO()
    write_tensors(buf, [("x", np.ones(3))])
    with pytest.raises(CheckpointError, match="truncated"):
        read_tensors(io.BytesIO(buf.getvalue()[:-4]))
    s = ParamStore()
    s.add("x", np.zeros(4))
    with pytest.raises(CheckpointError, match="dims"):
        load_into_store({"x": np.ones((3, 1, 1, 1))}, s)


@settings(max_examples=30, deadline=None)
@given(
    h=st.integers(1, 6), w=st.integers(1, 6), cin=st.integers(1, 3), cout=st.integers(1, 3),
    k=st.sampled_from([1, 3]), a=st.floats(-3, 3), seed=st.integers(0, 2**16),
)
def test_conv_is_linear_in_input(h, w, cin, cout, k, a, seed):
    r = np.random.default_rng(seed)
    x1, x2 = r.standard_normal((2, 1, cin, h, w))
    wt = r.standard_normal((cout, cin, k, k))
    spec = ConvSpec(cin, cout, k)
    lhs = conv2d_forward(a * x1 + x2, wt, None, spec)
    rhs = a * conv2d_forward(x1, wt, None, spec) + conv2d_forward(x2, wt, None, spec)
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)


@settings(max_examples=20, deadline=None)
@given(hh=st.integers(1, 4), ww=st.integers(1, 4), seed=st.integers(0, 2**16))
def test_conv_deterministic_and_finite(hh, ww, seed):
    r = np.random.default_rng(seed)
    x = r.standard_normal((1, 2, 2 * hh, 2 * ww))
    wt = r.standard_normal((3, 2, 3, 3))
    spec = ConvSpec(2, 3, 3, 2)
    y1 = conv2d_forward(x, wt, None, spec)
    y2 = conv2d_forward(x.copy(), wt.copy(), None, spec)
    assert y1.shape == (1, 3, hh, ww)
    assert np.array_equal(y1, y2) and np.all(np.isfinite(y1))
