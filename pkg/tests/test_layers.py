import numpy as np
import pytest

from repnerv import blocks as bk
from repnerv import fusion as fz
from repnerv import tensor as tz
from repnerv.layers import Mode, RepLayer, layer_step_time_probe, online_forward, step_time_probe, structural_fuse
from repnerv.tensor import Tape, Tensor, backward

from oracles import finite_difference, rel_err


def _erb_layer(rng, cin=2, cout=3, dtype=np.float32, mode=Mode.ONLINE_TRAIN):
    cfg = bk.erb_config(cin, cout, rng, dtype=dtype)
    for spec in cfg.branches:
        spec.params = {
            k: Tensor(rng.standard_normal(t.shape).astype(dtype) * 0.5)
            for k, t in spec.params.items()
        }
    return RepLayer(mode, cfg=cfg)


def test_online_only_vanilla_nonzero_equals_plain_conv():
    rng = np.random.default_rng(0)
    layer = _erb_layer(rng, 3, 3)
    for spec in layer.cfg.branches[1:]:
        spec.params = {k: Tensor(np.zeros(t.shape, np.float32)) for k, t in spec.params.items()}
    x = Tensor(rng.standard_normal((1, 3, 5, 5)).astype(np.float32))
    got = online_forward(layer, x).data
    want = tz.conv2d(
        x,
        tz.ConvWeight(layer.cfg.branches[0].params["kernel"], layer.cfg.branches[0].params["bias"]),
        pad=1,
    ).data
    assert rel_err(got, want) <= 1e-7


def test_online_equals_explicit_forward():
    rng = np.random.default_rng(1)
    layer = _erb_layer(rng)
    x = Tensor(rng.standard_normal((1, 2, 6, 6)).astype(np.float32))
    online = online_forward(layer, x).data
    explicit = bk.block_forward_explicit(layer.cfg, x).data
    assert rel_err(online, explicit) <= 1e-5


def test_online_forward_wrong_mode():
    rng = np.random.default_rng(2)
    layer = _erb_layer(rng, mode=Mode.EXPLICIT_TRAIN)
    with pytest.raises(RuntimeError):
        online_forward(layer, Tensor(np.zeros((1, 2, 4, 4), np.float32)))


def test_online_gradients_match_explicit_and_finite_differences():
    rng = np.random.default_rng(3)
    layer64 = _erb_layer(rng, 2, 2, dtype=np.float64)
    x = Tensor(rng.standard_normal((1, 2, 5, 5)))
    direction = rng.standard_normal((1, 2, 5, 5))

    def run(mode):
        tape = Tape()
        bound = layer64.map_params("layer", lambda n, t: tape.param(t, n))
        bound = RepLayer(Mode(mode), cfg=bound.cfg)
        y = bound.forward(x)
        loss = tz.sum_all(tz.mul(y, Tensor(direction)))
        return backward(tape, loss)

    g_online = run("online")
    g_explicit = run("explicit")
    for name in g_online:
        assert rel_err(g_online[name].data, g_explicit[name].data) <= 1e-4, name

    arrays = {n: t.data.copy() for n, t in layer64.named_params("layer")}

    def f(arrs):
        tape = Tape()
        bound = layer64.map_params("layer", lambda n, t: tape.param(arrs[n], n))
        y = online_forward(RepLayer(Mode.ONLINE_TRAIN, cfg=bound.cfg), x)
        return tz.sum_all(tz.mul(y, Tensor(direction))).item()

    fd = finite_difference(f, arrays, list(arrays), step=1e-3)
    for name in arrays:
        assert rel_err(g_online[name].data, fd[name]) <= 1e-4, name


def test_exactly_one_conv_per_online_forward():
    rng = np.random.default_rng(4)
    layer = _erb_layer(rng)
    tape = Tape()
    bound = RepLayer(Mode.ONLINE_TRAIN, cfg=layer.map_params("l", lambda n, t: tape.param(t, n)).cfg)
    x = Tensor(rng.standard_normal((1, 2, 6, 6)).astype(np.float32))
    online_forward(bound, x)
    assert tape.op_counts().get("conv2d", 0) == 1


def test_explicit_mode_runs_many_convs():
    rng = np.random.default_rng(5)
    layer = _erb_layer(rng, mode=Mode.EXPLICIT_TRAIN)
    tape = Tape()
    bound = RepLayer(Mode.EXPLICIT_TRAIN, cfg=layer.map_params("l", lambda n, t: tape.param(t, n)).cfg)
    x = Tensor(rng.standard_normal((1, 2, 6, 6)).astype(np.float32))
    bound.forward(x)
    assert tape.op_counts()["conv2d"] >= 6  # 3x3 + 1x3 + 3x1 + three sequential stages


def test_prefuse_reuses_kernel_single_fusion_many_frames():
    rng = np.random.default_rng(6)
    layer = _erb_layer(rng)
    tape = Tape()
    bound = RepLayer(Mode.ONLINE_TRAIN, cfg=layer.map_params("l", lambda n, t: tape.param(t, n)).cfg)
    fused_once = bound.prefuse()
    x1 = Tensor(rng.standard_normal((1, 2, 6, 6)).astype(np.float32))
    x2 = Tensor(rng.standard_normal((1, 2, 6, 6)).astype(np.float32))
    online_forward(fused_once, x1)
    online_forward(fused_once, x2)
    counts = tape.op_counts()
    assert counts["conv2d"] == 2
    assert counts["mix_kernels"] == 2  # one fusion pass, not one per frame


# ---------------------------------------------------------------------------
# structural fusion


def test_structural_fuse_preserves_outputs():
    rng = np.random.default_rng(7)
    layer = _erb_layer(rng, 3, 4)
    deployed = structural_fuse(layer)
    assert deployed.mode is Mode.DEPLOYED
    for _ in range(50):
        x = Tensor(rng.standard_normal((1, 3, 6, 6)).astype(np.float32))
        before = online_forward(layer, x).data
        after = deployed.forward(x).data
        assert rel_err(after, before) <= 1e-6


def test_structural_fuse_single_vanilla_bit_identical():
    rng = np.random.default_rng(8)
    spec = bk.init_branch(bk.VANILLA, 2, 3, rng)
    layer = RepLayer(Mode.ONLINE_TRAIN, cfg=bk.BlockConfig(2, 3, [spec]))
    deployed = structural_fuse(layer)
    np.testing.assert_array_equal(
        deployed.fused.weight.kernel.data, spec.params["kernel"].data
    )
    np.testing.assert_array_equal(deployed.fused.weight.bias.data, spec.params["bias"].data)


def test_structural_fuse_param_count():
    rng = np.random.default_rng(9)
    cin, cout = 3, 4
    layer = _erb_layer(rng, cin, cout)
    train_count = layer.param_count()
    deployed = structural_fuse(layer)
    assert deployed.param_count() == cout * cin * 9 + cout
    assert deployed.param_count() < train_count


def test_structural_fuse_already_deployed_errors():
    rng = np.random.default_rng(10)
    deployed = structural_fuse(_erb_layer(rng))
    with pytest.raises(RuntimeError):
        structural_fuse(deployed)


def test_deployed_holds_no_branch_params():
    rng = np.random.default_rng(11)
    deployed = structural_fuse(_erb_layer(rng))
    names = [n for n, _ in deployed.named_params("d")]
    assert names == ["d.kernel", "d.bias"]
    with pytest.raises(ValueError):
        RepLayer(Mode.DEPLOYED, cfg=_erb_layer(rng).cfg, fused=deployed.fused)


# ---------------------------------------------------------------------------
# timing probe


def test_step_time_probe_sanity_and_repeatability():
    calls = {"n": 0}

    def fast():
        calls["n"] += 1
        sum(range(200))

    res1 = step_time_probe({"fast": fast}, repetitions=20)
    res2 = step_time_probe({"fast": fast}, repetitions=20)
    assert res1["fast"] > 0 and res2["fast"] > 0
    assert calls["n"] >= 40


def test_step_time_probe_rejects_tiny_repetitions():
    with pytest.raises(ValueError):
        step_time_probe({"f": lambda: None}, repetitions=5)


def test_layer_probe_orders_explicit_slowest():
    rng = np.random.default_rng(12)
    cfg = bk.erb_config(16, 16, rng)
    x = Tensor(rng.standard_normal((1, 16, 16, 32)).astype(np.float32))
    times = layer_step_time_probe(cfg, x, repetitions=20)
    assert set(times) == {"plain", "online", "explicit"}
    assert times["explicit"] > times["online"]
    assert times["online"] >= times["plain"] * 0.5  # sanity only; ratios asserted at model scale
