import math

import numpy as np
import pytest

from repnerv import tensor as tz
from repnerv.tensor import ConvWeight, Tape, Tensor, backward

from oracles import conv2d_loops, finite_difference, linear_loops, pixel_shuffle_inverse, rel_err


def _cw(kernel, bias, dtype=np.float32):
    return ConvWeight(Tensor(np.asarray(kernel, dtype)), Tensor(np.asarray(bias, dtype)))


# ---------------------------------------------------------------------------
# conv2d


def test_conv2d_all_ones_counts_overlap():
    x = Tensor(np.ones((1, 1, 3, 3), np.float32))
    w = _cw(np.ones((1, 1, 3, 3)), [0.0])
    y = tz.conv2d(x, w, pad=1).data[0, 0]
    assert y[1, 1] == 9.0
    assert y[0, 1] == y[1, 0] == y[1, 2] == y[2, 1] == 6.0
    assert y[0, 0] == y[0, 2] == y[2, 0] == y[2, 2] == 4.0


def test_conv2d_identity_kernel():
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((2, 1, 4, 5), np.float32))
    w = _cw(np.ones((1, 1, 1, 1)), [0.0])
    y = tz.conv2d(x, w, pad=0)
    np.testing.assert_array_equal(y.data, x.data)


@pytest.mark.parametrize("seed", range(5))
def test_conv2d_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, 2, 5, 5)).astype(np.float32)
    k = rng.standard_normal((3, 2, 3, 3)).astype(np.float32)
    b = rng.standard_normal(3).astype(np.float32)
    got = tz.conv2d(Tensor(x), _cw(k, b), pad=1).data
    want = conv2d_loops(x, k, b, pad=1)
    assert rel_err(got, want) <= 1e-6


def test_conv2d_oracle_many_random_cases():
    rng = np.random.default_rng(7)
    for _ in range(200):
        n = int(rng.integers(1, 3))
        c = int(rng.integers(1, 5))
        o = int(rng.integers(1, 5))
        h = int(rng.integers(3, 9))
        w = int(rng.integers(3, 9))
        kh, kw = rng.choice([1, 3], size=2)
        pad = (int(kh) // 2, int(kw) // 2)
        x = rng.standard_normal((n, c, h, w)).astype(np.float32)
        k = rng.standard_normal((o, c, kh, kw)).astype(np.float32)
        b = rng.standard_normal(o).astype(np.float32)
        got = tz.conv2d(Tensor(x), _cw(k, b), pad=pad).data
        want = conv2d_loops(x, k, b, pad=pad)
        assert rel_err(got, want) <= 1e-6


def test_conv2d_oracle_float64_tight():
    rng = np.random.default_rng(11)
    for _ in range(20):
        x = rng.standard_normal((1, 3, 6, 7))
        k = rng.standard_normal((2, 3, 3, 3))
        b = rng.standard_normal(2)
        got = tz.conv2d(Tensor(x), _cw(k, b, np.float64), pad=1).data
        want = conv2d_loops(x, k, b, pad=1)
        assert rel_err(got, want) <= 1e-12


def test_conv2d_channel_mismatch():
    x = Tensor(np.zeros((1, 2, 4, 4), np.float32))
    w = _cw(np.zeros((1, 3, 3, 3)), [0.0])
    with pytest.raises(ValueError):
        tz.conv2d(x, w, pad=1)


def test_conv2d_kernel_too_large():
    x = Tensor(np.zeros((1, 1, 2, 2), np.float32))
    w = _cw(np.zeros((1, 1, 3, 3)), [0.0])
    with pytest.raises(ValueError):
        tz.conv2d(x, w, pad=0)


# ---------------------------------------------------------------------------
# linear


def test_linear_identity():
    x = Tensor(np.arange(4, dtype=np.float32))
    y = tz.linear(x, Tensor(np.eye(4, dtype=np.float32)), Tensor(np.zeros(4, np.float32)))
    np.testing.assert_array_equal(y.data, x.data)


def test_linear_hand_sum():
    y = tz.linear(
        Tensor(np.array([1.0, 1.0], np.float32)),
        Tensor(np.array([[1.0, 1.0]], np.float32)),
        Tensor(np.array([1.0], np.float32)),
    )
    assert y.data.tolist() == [3.0]


def test_linear_matches_loop_oracle():
    rng = np.random.default_rng(3)
    x = rng.standard_normal(8).astype(np.float32)
    w = rng.standard_normal((16, 8)).astype(np.float32)
    b = rng.standard_normal(16).astype(np.float32)
    got = tz.linear(Tensor(x), Tensor(w), Tensor(b)).data
    assert rel_err(got, linear_loops(x, w, b)) <= 1e-6


def test_linear_dim_mismatch():
    with pytest.raises(ValueError):
        tz.linear(
            Tensor(np.zeros(3, np.float32)),
            Tensor(np.zeros((2, 4), np.float32)),
            Tensor(np.zeros(2, np.float32)),
        )


# ---------------------------------------------------------------------------
# pixel_shuffle


def test_pixel_shuffle_definitional():
    x = Tensor(np.array([1.0, 2.0, 3.0, 4.0], np.float32).reshape(1, 4, 1, 1))
    y = tz.pixel_shuffle(x, 2)
    np.testing.assert_array_equal(y.data[0, 0], [[1.0, 2.0], [3.0, 4.0]])


def test_pixel_shuffle_r1_identity():
    x = Tensor(np.random.default_rng(0).standard_normal((2, 3, 4, 4)).astype(np.float32))
    np.testing.assert_array_equal(tz.pixel_shuffle(x, 1).data, x.data)


def test_pixel_shuffle_bijection():
    rng = np.random.default_rng(9)
    x = rng.standard_normal((1, 18, 4, 4)).astype(np.float32)
    y = tz.pixel_shuffle(Tensor(x), 3).data
    np.testing.assert_array_equal(pixel_shuffle_inverse(y, 3), x)


def test_pixel_shuffle_bad_channels():
    with pytest.raises(ValueError):
        tz.pixel_shuffle(Tensor(np.zeros((1, 3, 2, 2), np.float32)), 2)


# ---------------------------------------------------------------------------
# gelu


def test_gelu_zero_and_asymptote():
    y = tz.gelu(Tensor(np.array([0.0, 6.0], np.float32))).data
    assert y[0] == 0.0
    assert abs(y[1] - 6.0) < 1e-3


def test_gelu_exact_cdf_value():
    # x * Phi(x) at x=1 via an erf oracle
    want = 1.0 * 0.5 * (1.0 + math.erf(1.0 / math.sqrt(2.0)))
    got = tz.gelu(Tensor(np.array([1.0], np.float64))).data[0]
    assert abs(got - want) < 1e-12
    assert abs(got - 0.8413) < 1e-4


# ---------------------------------------------------------------------------
# linearity (bias zeroed)


@pytest.mark.parametrize("op", ["conv2d", "linear", "pixel_shuffle"])
def test_ops_linear_in_input(op):
    rng = np.random.default_rng(21)
    a, b = 1.7, -0.6
    if op == "conv2d":
        x = rng.standard_normal((1, 2, 5, 5))
        y = rng.standard_normal((1, 2, 5, 5))
        k = rng.standard_normal((3, 2, 3, 3))
        bias = np.zeros(3)
        f = lambda v: tz.conv2d(Tensor(v), _cw(k, bias, np.float64), pad=1).data
    elif op == "linear":
        x = rng.standard_normal(6)
        y = rng.standard_normal(6)
        w = rng.standard_normal((4, 6))
        bias = np.zeros(4)
        f = lambda v: tz.linear(Tensor(v), Tensor(w), Tensor(bias)).data
    else:
        x = rng.standard_normal((1, 8, 3, 3))
        y = rng.standard_normal((1, 8, 3, 3))
        f = lambda v: tz.pixel_shuffle(Tensor(v), 2).data
    lhs = f(a * x + b * y)
    rhs = a * f(x) + b * f(y)
    assert rel_err(lhs, rhs) <= 1e-10


# ---------------------------------------------------------------------------
# backward


def test_backward_sum_of_param_is_ones():
    tape = Tape()
    x = tape.param(np.arange(12, dtype=np.float32).reshape(1, 3, 2, 2), "x")
    loss = tz.sum_all(x)
    grads = backward(tape, loss)
    np.testing.assert_array_equal(grads["x"].data, np.ones((1, 3, 2, 2), np.float32))


def test_backward_conv_bias_grad_is_nhw():
    rng = np.random.default_rng(4)
    tape = Tape()
    x = Tensor(rng.standard_normal((2, 2, 4, 5)).astype(np.float32))
    k = tape.param(rng.standard_normal((3, 2, 3, 3)).astype(np.float32), "k")
    b = tape.param(np.zeros(3, np.float32), "b")
    loss = tz.sum_all(tz.conv2d(x, ConvWeight(k, b), pad=1))
    grads = backward(tape, loss)
    np.testing.assert_allclose(grads["b"].data, np.full(3, 2 * 4 * 5, np.float32))


def test_backward_unused_param_gets_zero():
    tape = Tape()
    x = tape.param(np.ones(3, np.float32), "x")
    unused = tape.param(np.ones(2, np.float32), "unused")
    grads = backward(tape, tz.sum_all(x))
    np.testing.assert_array_equal(grads["unused"].data, np.zeros(2, np.float32))


def test_backward_rejects_nonscalar_and_foreign_loss():
    tape = Tape()
    x = tape.param(np.ones(3, np.float32), "x")
    with pytest.raises(ValueError):
        backward(tape, tz.mul(x, 2.0))
    other = Tensor(np.zeros((), np.float32))
    with pytest.raises(ValueError):
        backward(tape, other)


def _compose_graph(arrays):
    """A graph touching every op: conv -> shuffle -> gelu -> linear-ish mix."""
    tape = Tape()
    x = tape.param(arrays["x"], "x")
    k = tape.param(arrays["k"], "k")
    b = tape.param(arrays["b"], "b")
    w = tape.param(arrays["w"], "w")
    b2 = tape.param(arrays["b2"], "b2")
    h = tz.conv2d(x, ConvWeight(k, b), pad=1)
    h = tz.pixel_shuffle(h, 2)
    h = tz.gelu(h)
    flat = tz.reshape(h, (h.size,))
    out = tz.linear(flat, w, b2)
    loss = tz.mean_all(tz.mul(out, out))
    return tape, loss


def test_backward_matches_finite_differences():
    rng = np.random.default_rng(17)
    arrays = {
        "x": rng.standard_normal((1, 2, 4, 4)),
        "k": rng.standard_normal((4, 2, 3, 3)) * 0.5,
        "b": rng.standard_normal(4) * 0.1,
        "w": rng.standard_normal((3, 1 * 1 * 8 * 8)) * 0.2,
        "b2": rng.standard_normal(3) * 0.1,
    }
    tape, loss = _compose_graph(arrays)
    grads = backward(tape, loss)

    def f(arrs):
        _, l = _compose_graph(arrs)
        return l.item()

    fd = finite_difference(f, arrays, list(arrays), step=1e-3)
    for name in arrays:
        assert rel_err(grads[name].data, fd[name]) <= 1e-4, name


def test_backward_elementwise_ops_finite_differences():
    rng = np.random.default_rng(23)
    arrays = {"a": rng.standard_normal(10) + 3.0, "b": rng.standard_normal(10) + 3.0}

    def build(arrs):
        tape = Tape()
        a = tape.param(arrs["a"], "a")
        b = tape.param(arrs["b"], "b")
        y = tz.div(tz.mul(a, b), tz.add(tz.abs_(b), 1.0))
        y = tz.sub(y, tz.clamp(a, -1.0, 1.0))
        return tape, tz.mean_all(y)

    tape, loss = build(arrays)
    grads = backward(tape, loss)
    fd = finite_difference(lambda arrs: build(arrs)[1].item(), arrays, ["a", "b"], 1e-4)
    for name in ("a", "b"):
        assert rel_err(grads[name].data, fd[name]) <= 1e-4


def test_randomized_op_gradients_small_shapes():
    rng = np.random.default_rng(31)
    for _ in range(5):
        c = int(rng.integers(1, 5))
        o = int(rng.integers(1, 5)) * 4
        h = int(rng.integers(2, 8))
        w = int(rng.integers(2, 8))
        arrays = {
            "x": rng.standard_normal((1, c, h, w)),
            "k": rng.standard_normal((o, c, 3, 3)) * 0.3,
            "b": rng.standard_normal(o) * 0.1,
        }

        def build(arrs):
            tape = Tape()
            x = tape.param(arrs["x"], "x")
            k = tape.param(arrs["k"], "k")
            b = tape.param(arrs["b"], "b")
            y = tz.conv2d(x, ConvWeight(k, b), pad=1)
            y = tz.pixel_shuffle(y, 2)
            return tape, tz.mean_all(tz.gelu(y))

        tape, loss = build(arrays)
        grads = backward(tape, loss)
        fd = finite_difference(lambda a: build(a)[1].item(), arrays, list(arrays), 1e-3)
        for name in arrays:
            assert rel_err(grads[name].data, fd[name]) <= 1e-4


# ---------------------------------------------------------------------------
# tape behaviour


def test_tape_replay_reproduces_outputs():
    rng = np.random.default_rng(5)
    arrays = {
        "x": rng.standard_normal((1, 2, 4, 4)).astype(np.float32),
        "k": rng.standard_normal((4, 2, 3, 3)).astype(np.float32),
        "b": rng.standard_normal(4).astype(np.float32),
        "w": rng.standard_normal((3, 64)).astype(np.float32),
        "b2": rng.standard_normal(3).astype(np.float32),
    }
    tape, loss = _compose_graph(arrays)
    assert tape.replay()


def test_tape_duplicate_param_name_rejected():
    tape = Tape()
    tape.param(np.ones(1, np.float32), "p")
    with pytest.raises(ValueError):
        tape.param(np.ones(1, np.float32), "p")


def test_op_counts():
    tape = Tape()
    x = tape.param(np.ones((1, 4, 2, 2), np.float32), "x")
    tz.pixel_shuffle(tz.gelu(x), 2)
    counts = tape.op_counts()
    assert counts["gelu"] == 1 and counts["pixel_shuffle"] == 1


def test_outputs_finite_on_finite_inputs():
    rng = np.random.default_rng(13)
    x = Tensor(rng.standard_normal((2, 3, 6, 6)).astype(np.float32) * 100)
    k = rng.standard_normal((3, 3, 3, 3)).astype(np.float32)
    b = rng.standard_normal(3).astype(np.float32)
    y = tz.conv2d(x, _cw(k, b), pad=1)
    y = tz.gelu(y)
    y = tz.pixel_shuffle(tz.mul(y, 0.25), 1)
    assert np.isfinite(y.data).all()


# ---------------------------------------------------------------------------
# tensor file format


def test_tensor_file_roundtrip(tmp_path):
    rng = np.random.default_rng(2)
    t = Tensor(rng.standard_normal((2, 3, 4, 5)).astype(np.float32))
    p = tmp_path / "t.rnvt"
    tz.save_tensor(p, t)
    raw = p.read_bytes()
    assert raw[:4] == b"RNVT"
    assert len(raw) == 4 + 32 + t.size * 4
    back = tz.load_tensor(p)
    np.testing.assert_array_equal(back.data, t.data)


def test_tensor_file_lower_rank_padded(tmp_path):
    t = Tensor(np.arange(6, dtype=np.float32))
    p = tmp_path / "flat.rnvt"
    tz.save_tensor(p, t)
    back = tz.load_tensor(p)
    assert back.shape == (1, 1, 1, 6)
    np.testing.assert_array_equal(back.data.reshape(-1), t.data)


def test_tensor_file_bad_magic(tmp_path):
    p = tmp_path / "bad.rnvt"
    p.write_bytes(b"XXXX" + b"\x00" * 32)
    with pytest.raises(ValueError):
        tz.load_tensor(p)
