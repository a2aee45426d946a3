"""Tensor engine: forward values, gradients vs finite differences, RNG contracts."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import ktextures.engine as E
from ktextures.engine import _kernels

from helpers import assert_grad_close, finite_diff_grad
from reference_ops import batch_norm_ref, conv2d_ref, elu_ref, mse_ref


def rng(seed=0):
    return np.random.default_rng(seed)


# ---------------------------------------------------------------------------
# conv2d


def test_conv_scalar_affine():
    x = E.Tensor(np.full((1, 1, 1, 1), 2.0))
    p = E.ConvParams(np.full((1, 1, 1, 1), 3.0), np.array([1.0]))
    y = E.conv2d(x, p, padding="valid")
    assert y.data.reshape(()) == pytest.approx(7.0)


def test_conv_sum_of_ones():
    x = E.Tensor(np.ones((1, 3, 3, 1)))
    p = E.ConvParams(np.ones((3, 3, 1, 1)), np.zeros(1))
    y = E.conv2d(x, p, padding="valid")
    assert y.data.shape == (1, 1, 1, 1)
    assert y.data.reshape(()) == pytest.approx(9.0)


def test_conv_same_padding_keeps_size():
    x = E.Tensor(rng(1).standard_normal((2, 5, 5, 3)))
    p = E.ConvParams.create(3, 3, 3, 4, rng(2))
    y = E.conv2d(x, p, padding="same")
    assert y.data.shape == (2, 5, 5, 4)


def test_conv_channel_mismatch_reports_both_shapes():
    x = E.Tensor(np.zeros((1, 4, 4, 2)))
    p = E.ConvParams.create(3, 3, 3, 4, rng(0))
    with pytest.raises(E.ShapeError) as err:
        E.conv2d(x, p, padding="valid")
    assert "(1, 4, 4, 2)" in str(err.value) and "(3, 3, 3, 4)" in str(err.value)


def test_conv_kernel_grad_matches_finite_differences():
    # FD runs on an independent float64 reference forward of the same math.
    g = rng(3)
    xdat = g.standard_normal((1, 5, 5, 2)).astype(np.float32)
    p = E.ConvParams.create(3, 3, 2, 3, g)

    def run():
        return float(conv2d_ref(xdat, p.kernel.data, p.bias.data, "valid").sum())

    run_t = E.tsum(E.conv2d(E.Tensor(xdat), p, padding="valid"))
    E.backward(run_t)
    fd = finite_diff_grad(run, p.kernel)
    assert_grad_close(p.kernel.grad, fd, abs_floor=1e-4)


def test_conv_input_grad_strided_same():
    g = rng(4)
    x = E.Tensor(g.standard_normal((1, 6, 6, 2)).astype(np.float32), requires_grad=True)
    p = E.ConvParams.create(3, 3, 2, 2, g)

    def run():
        return float(conv2d_ref(x.data, p.kernel.data, p.bias.data, "same", stride=2).sum())

    out = E.tsum(E.conv2d(x, p, padding="same", stride=2))
    E.backward(out)
    fd = finite_diff_grad(run, x)
    assert_grad_close(x.grad, fd, abs_floor=1e-4)


def test_conv_1x1_fast_path_grads():
    g = rng(5)
    p = E.ConvParams.create(1, 1, 3, 4, g)
    xdat = g.standard_normal((2, 3, 3, 3)).astype(np.float32)

    def run():
        return float(conv2d_ref(xdat, p.kernel.data, p.bias.data, "same").sum())

    out = E.tsum(E.conv2d(E.Tensor(xdat), p, padding="same"))
    E.backward(out)
    fd = finite_diff_grad(run, p.kernel)
    assert_grad_close(p.kernel.grad, fd, abs_floor=1e-4)
    assert p.bias.grad == pytest.approx(np.full(4, 2 * 9), rel=1e-5)


# ---------------------------------------------------------------------------
# batch norm


def test_batch_norm_normalizes():
    g = rng(6)
    x = 5.0 + 2.0 * g.standard_normal((4, 8, 8, 3))
    p = E.BatchNormParams(3, epsilon=1e-8)
    y = E.batch_norm(E.Tensor(x), p, training=True).data
    assert np.abs(y.mean(axis=(0, 1, 2))).max() < 1e-5
    assert np.abs(y.var(axis=(0, 1, 2)) - 1.0).max() < 1e-5


def test_batch_norm_affine_identity():
    g = rng(7)
    x = g.standard_normal((2, 16, 16, 2)).astype(np.float32)
    x = (x - x.mean(axis=(0, 1, 2))) / x.std(axis=(0, 1, 2))
    p = E.BatchNormParams(2, epsilon=1e-8)
    p.gamma.data[:] = 2.0
    p.beta.data[:] = 3.0
    y = E.batch_norm(E.Tensor(x), p, training=True).data
    assert y.mean(axis=(0, 1, 2)) == pytest.approx([3.0, 3.0], abs=1e-4)
    assert y.std(axis=(0, 1, 2)) == pytest.approx([2.0, 2.0], abs=1e-4)


def test_batch_norm_grads_match_finite_differences():
    g = rng(8)
    x = E.Tensor(g.standard_normal((2, 4, 4, 3)).astype(np.float32), requires_grad=True)
    p = E.BatchNormParams(3)
    p.gamma.data[:] = g.uniform(0.5, 1.5, 3).astype(np.float32)
    p.beta.data[:] = g.uniform(-0.5, 0.5, 3).astype(np.float32)
    tgt = g.standard_normal((2, 4, 4, 3)).astype(np.float32)

    def run():
        ref = batch_norm_ref(x.data, p.gamma.data, p.beta.data, p.epsilon, training=True)
        return mse_ref(ref, tgt)

    out = E.mse(E.batch_norm(x, p, training=True), E.Tensor(tgt))
    E.backward(out)
    for t in (x, p.gamma, p.beta):
        fd = finite_diff_grad(run, t)
        assert_grad_close(t.grad, fd, abs_floor=1e-4)


def test_batch_norm_empty_batch_rejected():
    p = E.BatchNormParams(3)
    with pytest.raises(E.ParamError):
        E.batch_norm(E.Tensor(np.zeros((0, 2, 2, 3))), p, training=True)


def test_batch_norm_running_stats_used_at_inference():
    g = rng(9)
    p = E.BatchNormParams(2, momentum=0.5)
    x = g.standard_normal((8, 4, 4, 2)).astype(np.float32) * 3.0 + 1.0
    for _ in range(60):
        E.batch_norm(E.Tensor(x), p, training=True)
    y_inf = E.batch_norm(E.Tensor(x), p, training=False).data
    y_tr = E.batch_norm(E.Tensor(x), p, training=True).data
    assert np.allclose(y_inf, y_tr, atol=1e-3)


def test_bn_act_matches_composition():
    g = rng(10)
    x = g.standard_normal((2, 6, 6, 4)).astype(np.float32)
    for kind, alpha in [("elu", 1.0), ("sigmoid", 0.0), ("leaky_relu", 0.2), ("identity", 0.0)]:
        p1 = E.BatchNormParams(4)
        p2 = E.BatchNormParams(4)
        for p in (p1, p2):
            p.gamma.data[:] = g.uniform(0.5, 1.5, 4).astype(np.float32)
        p2.gamma.data[:] = p1.gamma.data
        for training in (True, False):
            fused = E.bn_act(E.Tensor(x), p1, kind, training=training, alpha=alpha).data
            ref = E.batch_norm(E.Tensor(x), p2, training=training)
            if kind != "identity":
                ref = E.activate(ref, kind, alpha=alpha)
            assert np.allclose(fused, ref.data, atol=2e-5), (kind, training)


def test_bn_act_grads_match_finite_differences():
    g = rng(11)
    x = E.Tensor(g.standard_normal((2, 4, 4, 3)).astype(np.float32), requires_grad=True)
    p = E.BatchNormParams(3)
    tgt = g.uniform(0, 1, (2, 4, 4, 3)).astype(np.float32)

    def run():
        ref = batch_norm_ref(x.data, p.gamma.data, p.beta.data, p.epsilon, training=True)
        return mse_ref(elu_ref(ref), tgt)

    out = E.mse(E.bn_act(x, p, "elu", training=True), E.Tensor(tgt))
    E.backward(out)
    for t in (x, p.gamma, p.beta):
        fd = finite_diff_grad(run, t)
        assert_grad_close(t.grad, fd, abs_floor=1e-4)


# ---------------------------------------------------------------------------
# activations


def test_hard_sigmoid_steep_values():
    x = E.Tensor(np.array([0.0001, 0.0, 0.0002], dtype=np.float32))
    y = E.hard_sigmoid(x, 5000.0, 0.0).data
    assert y[0] == pytest.approx(0.5, abs=1e-6)
    assert y[1] == pytest.approx(0.0, abs=0.0)
    assert y[2] == pytest.approx(1.0, abs=1e-5)


def test_hard_sigmoid_tensorflow_variant():
    y = E.hard_sigmoid(E.Tensor(np.array([0.0])), 0.2, 0.5).data
    assert y[0] == pytest.approx(0.5)


def test_sigmoid_derivative_at_zero():
    x = E.Tensor(np.array([0.0], dtype=np.float32), requires_grad=True)
    y = E.sigmoid(x)
    E.backward(y)
    assert x.grad[0] == pytest.approx(0.25, abs=1e-6)


@settings(max_examples=50, deadline=None)
@given(st.floats(min_value=-10, max_value=10, allow_nan=False))
def test_hard_sigmoid_range_and_plateau_subgradient(v):
    x = E.Tensor(np.array([v], dtype=np.float32), requires_grad=True)
    y = E.hard_sigmoid(x, 5000.0, 0.0)
    assert 0.0 <= y.data[0] <= 1.0
    E.backward(y)
    z = float(np.float32(v)) * 5000.0
    if z <= 0.0 or z >= 1.0:
        assert x.grad[0] == 0.0
    else:
        assert x.grad[0] == pytest.approx(5000.0)


def test_activate_dispatcher_rejects_unknown():
    with pytest.raises(E.ParamError):
        E.activate(E.Tensor([0.0]), "swish")


def test_elu_grad_matches_finite_differences():
    g = rng(12)
    x = E.Tensor(g.standard_normal(32).astype(np.float32), requires_grad=True)
    tgt = np.zeros(32, dtype=np.float32)

    def run():
        return E.mse(E.elu(E.Tensor(x.data)), E.Tensor(tgt)).item()

    E.backward(E.mse(E.elu(x), E.Tensor(tgt)))
    assert_grad_close(x.grad, finite_diff_grad(run, x))


# ---------------------------------------------------------------------------
# dropout / noise


def test_dropout_identity_at_rate_zero():
    x = E.Tensor(rng(0).random(100))
    y = E.dropout(x, 0.0, rng(1))
    assert y is x


def test_dropout_mean_preserved():
    x = E.Tensor(np.ones(100_000, dtype=np.float32))
    y = E.dropout(x, 0.5, rng(2)).data
    assert 0.98 <= y.mean() <= 1.02


def test_dropout_deterministic_per_seed():
    x = E.Tensor(np.ones(1000))
    a = E.dropout(x, 0.3, 42).data
    b = E.dropout(x, 0.3, 42).data
    assert np.array_equal(a, b)
    c = E.dropout(x, 0.3, 43).data
    assert not np.array_equal(a, c)


def test_dropout_rate_one_rejected():
    with pytest.raises(E.ParamError):
        E.dropout(E.Tensor(np.ones(4)), 1.0, 0)


def test_gaussian_noise_identity_cases():
    x = E.Tensor(np.ones(10))
    assert E.gaussian_noise(x, 0.0, 0) is x
    assert E.gaussian_noise(x, 0.1, 0, training=False) is x


def test_gaussian_noise_sample_sd():
    x = E.Tensor(np.zeros(1_000_000, dtype=np.float32))
    y = E.gaussian_noise(x, 0.0005, rng(3)).data
    assert 0.00049 <= y.std() <= 0.00051


def test_gaussian_noise_grad_passthrough():
    x = E.Tensor(np.zeros(50, dtype=np.float32), requires_grad=True)
    out = E.tsum(E.gaussian_noise(x, 0.0005, rng(4)))
    E.backward(out)
    assert np.array_equal(x.grad, np.ones(50, dtype=np.float32))


# ---------------------------------------------------------------------------
# mirror pad / crop / clip


def test_mirror_pad_row_example():
    y = E.mirror_pad(E.Tensor(np.array([1.0, 2.0, 3.0])), 1).data
    assert y.tolist() == [2.0, 1.0, 2.0, 3.0, 2.0]


def test_crop_136_to_128():
    x = E.Tensor(np.zeros((1, 136, 136, 1)))
    assert E.crop(x, 4).data.shape == (1, 128, 128, 1)


@settings(max_examples=20, deadline=None)
@given(st.integers(min_value=1, max_value=3), st.integers(min_value=8, max_value=12))
def test_crop_mirror_pad_roundtrip(border, size):
    x = rng(size).random((2, size, size, 3)).astype(np.float32)
    y = E.crop(E.mirror_pad(E.Tensor(x), border), border).data
    assert np.array_equal(x, y)


def test_mirror_pad_border_too_large():
    with pytest.raises(E.ShapeError):
        E.mirror_pad(E.Tensor(np.zeros((1, 3, 3, 1))), 3)


def test_mirror_pad_grad_matches_finite_differences():
    g = rng(13)
    x = E.Tensor(g.standard_normal((1, 4, 4, 2)).astype(np.float32), requires_grad=True)
    tgt = g.random((1, 8, 8, 2)).astype(np.float32)

    def run():
        return E.mse(E.mirror_pad(E.Tensor(x.data), 2), E.Tensor(tgt)).item()

    E.backward(E.mse(E.mirror_pad(x, 2), E.Tensor(tgt)))
    assert_grad_close(x.grad, finite_diff_grad(run, x))


def test_clip_blocks_gradient_outside():
    x = E.Tensor(np.array([-1.0, 0.5, 2.0], dtype=np.float32), requires_grad=True)
    E.backward(E.tsum(E.clip(x, 0.0, 1.0)))
    assert x.grad.tolist() == [0.0, 1.0, 0.0]


# ---------------------------------------------------------------------------
# piecewise linear table


def test_piecewise_linear_matches_interp_and_slopes():
    table = np.array([0.0, 0.0, 0.5, 1.0, 1.0], dtype=np.float32)
    x0, step = 0.0, 0.25
    xs = np.array([-0.5, 0.1, 0.30, 0.62, 0.99, 1.7], dtype=np.float32)
    t = E.Tensor(xs, requires_grad=True)
    y = E.piecewise_linear(t, x0, step, table)
    ref = np.interp(xs, x0 + step * np.arange(5), table)
    assert np.allclose(y.data, ref, atol=1e-6)
    E.backward(E.tsum(y))
    slopes = np.diff(table) / step
    expect = [0.0, slopes[0], slopes[1], slopes[2], slopes[3], 0.0]
    assert np.allclose(t.grad, expect, atol=1e-4)


# ---------------------------------------------------------------------------
# losses


def test_losses_at_identical_inputs():
    x = E.Tensor(rng(14).random(64).astype(np.float32))
    assert E.mse(x, E.Tensor(x.data.copy())).item() == pytest.approx(0.0, abs=1e-6)
    # Smoothed dice vanishes on identical *binary* masks.
    b = E.Tensor((rng(14).random(64) > 0.5).astype(np.float32))
    assert E.dice_loss(b, E.Tensor(b.data.copy())).item() == pytest.approx(0.0, abs=1e-6)


def test_bce_half_vs_one_is_ln2():
    val = E.bce(E.Tensor([0.5]), E.Tensor([1.0])).item()
    assert val == pytest.approx(np.log(2.0), abs=1e-6)


def test_dice_all_zero_vs_all_one():
    p = E.Tensor(np.zeros(100, dtype=np.float32))
    t = E.Tensor(np.ones(100, dtype=np.float32))
    assert E.dice_loss(p, t).item() == pytest.approx(1.0 - 1.0 / 101.0, abs=1e-6)


def test_loss_shape_mismatch():
    with pytest.raises(E.ShapeError):
        E.mse(E.Tensor(np.zeros(3)), E.Tensor(np.zeros(4)))


def test_loss_dispatcher():
    p, t = E.Tensor([0.5]), E.Tensor([1.0])
    assert E.loss(p, t, "bce").item() == pytest.approx(np.log(2.0), abs=1e-6)
    with pytest.raises(E.ParamError):
        E.loss(p, t, "huber")


def test_bce_dice_grads_match_finite_differences():
    g = rng(15)
    for kind in ("bce", "dice"):
        p = E.Tensor(g.uniform(0.05, 0.95, 40).astype(np.float32), requires_grad=True)
        t = g.integers(0, 2, 40).astype(np.float32)

        def run():
            return E.loss(E.Tensor(p.data), E.Tensor(t), kind).item()

        E.backward(E.loss(p, E.Tensor(t), kind))
        assert_grad_close(p.grad, finite_diff_grad(run, p), rel=2e-3)


# ---------------------------------------------------------------------------
# backward semantics


def test_backward_simple_product():
    w = E.Tensor(np.array([1.0], dtype=np.float32), requires_grad=True)
    x = E.Tensor(np.array([2.0], dtype=np.float32))
    out = E.mse(E.mul(w, x), E.Tensor([0.0]))
    E.backward(out)
    assert w.grad[0] == pytest.approx(8.0, rel=1e-6)


def test_backward_composite_graph_finite_differences():
    g = rng(16)
    x = E.Tensor(g.standard_normal((2, 6, 6, 2)).astype(np.float32))
    conv = E.ConvParams.create(3, 3, 2, 3, g)
    bn = E.BatchNormParams(3)
    tgt = g.uniform(0, 1, (2, 4, 4, 3)).astype(np.float32)

    def graph():
        h = E.conv2d(E.Tensor(x.data), conv, padding="valid")
        h = E.batch_norm(h, bn, training=True)
        h = E.elu(h)
        return E.mse(h, E.Tensor(tgt))

    def graph_ref():
        h = conv2d_ref(x.data, conv.kernel.data, conv.bias.data, "valid")
        h = batch_norm_ref(h, bn.gamma.data, bn.beta.data, bn.epsilon, training=True)
        return mse_ref(elu_ref(h), tgt)

    E.backward(graph())
    for t in (conv.kernel, conv.bias, bn.gamma, bn.beta):
        fd = finite_diff_grad(graph_ref, t)
        assert_grad_close(t.grad, fd, abs_floor=1e-4)


def test_unused_parameter_grad_exactly_zero():
    used = E.Tensor(np.array([1.0], dtype=np.float32), requires_grad=True)
    unused = E.Tensor(np.array([5.0], dtype=np.float32), requires_grad=True)
    E.backward(E.mse(E.mul(used, E.Tensor([2.0])), E.Tensor([0.0])))
    assert np.array_equal(unused.grad, np.zeros(1, dtype=np.float32))


def test_backward_rejects_non_scalar():
    x = E.Tensor(np.ones(3), requires_grad=True)
    y = E.mul(x, x)
    with pytest.raises(E.GraphError):
        E.backward(y)


def test_repeated_backward_accumulates():
    w = E.Tensor(np.array([1.0], dtype=np.float32), requires_grad=True)
    out = E.mse(E.mul(w, E.Tensor([2.0])), E.Tensor([0.0]))
    E.backward(out)
    E.backward(out)
    assert w.grad[0] == pytest.approx(16.0, rel=1e-6)


def test_stack_backward_routes_slices():
    a = E.Tensor(np.ones(4), requires_grad=True)
    b = E.Tensor(np.full(4, 2.0), requires_grad=True)
    s = E.stack([a, b], axis=-1)
    assert s.data.shape == (4, 2)
    E.backward(E.tsum(E.mul(s, E.Tensor(np.array([1.0, 3.0], dtype=np.float32)))))
    assert np.array_equal(a.grad, np.ones(4, dtype=np.float32))
    assert np.array_equal(b.grad, np.full(4, 3.0, dtype=np.float32))


# ---------------------------------------------------------------------------
# optimizers


def test_sgd_step():
    p = E.Tensor(np.array([1.0], dtype=np.float32), requires_grad=True)
    p.grad[:] = 2.0
    E.SGD(lr=0.1).step([p])
    assert p.data[0] == pytest.approx(0.8, rel=1e-6)


def test_clip_gradients_norm():
    a = E.Tensor(np.array([0.0], dtype=np.float32), requires_grad=True)
    b = E.Tensor(np.array([0.0], dtype=np.float32), requires_grad=True)
    a.grad[:] = 3.0
    b.grad[:] = 4.0
    norm = E.clip_gradients([a, b], 1.0)
    assert norm == pytest.approx(5.0, rel=1e-6)
    assert a.grad[0] == pytest.approx(0.6, rel=1e-5)
    assert b.grad[0] == pytest.approx(0.8, rel=1e-5)


def test_adam_first_step_bias_corrected():
    p = E.Tensor(np.array([0.0], dtype=np.float32), requires_grad=True)
    p.grad[:] = 1.0
    E.Adam(lr=0.001).step([p])
    assert p.data[0] == pytest.approx(-0.001, abs=1e-7)


def test_optimizer_rejects_nan_grad():
    p = E.Tensor(np.array([0.0], dtype=np.float32), requires_grad=True)
    p.grad[:] = np.nan
    with pytest.raises(E.OptimError):
        E.Adam(lr=0.001).step([p])


# ---------------------------------------------------------------------------
# checkpoint round trip


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    g = rng(17)
    tensors = {
        "enc.w": g.standard_normal((3, 3, 4, 8)).astype(np.float32),
        "enc.b": g.standard_normal(8).astype(np.float32),
    }
    meta = {"k": "3", "note": "trained"}
    path = tmp_path / "model.ckpt"
    E.save_checkpoint(path, tensors, meta)
    back, meta2 = E.load_checkpoint(path)
    assert meta2 == meta
    for name, arr in tensors.items():
        assert back[name].dtype == np.float32
        assert np.array_equal(back[name], arr)


def test_checkpoint_truncated_rejected(tmp_path):
    path = tmp_path / "model.ckpt"
    E.save_checkpoint(path, {"w": np.arange(16, dtype=np.float32)}, {})
    raw = path.read_bytes()
    path.write_bytes(raw[:-8])
    with pytest.raises(E.FormatError):
        E.load_checkpoint(path)


def test_checkpoint_bad_magic_rejected(tmp_path):
    path = tmp_path / "model.ckpt"
    path.write_bytes(b"not a checkpoint\ndata\n")
    with pytest.raises(E.FormatError):
        E.load_checkpoint(path)


# ---------------------------------------------------------------------------
# kernels: numba path agrees with numpy fallback


def test_fused_kernels_match_numpy_fallback():
    g = rng(18)
    x = g.standard_normal((500, 8)).astype(np.float32)
    inv = g.uniform(0.5, 1.5, 8).astype(np.float32)
    muinv = g.uniform(-0.5, 0.5, 8).astype(np.float32)
    gamma = g.uniform(0.5, 1.5, 8).astype(np.float32)
    beta = g.uniform(-0.5, 0.5, 8).astype(np.float32)
    for act in (_kernels.ACT_IDENTITY, _kernels.ACT_ELU, _kernels.ACT_SIGMOID, _kernels.ACT_LEAKY):
        xn_ref = x * inv - muinv
        y_ref = _kernels._np_act(xn_ref * gamma + beta, act, 0.2)
        xn, y = _kernels.bn_act_fwd_train(x, inv, muinv, gamma, beta, 0.2, act)
        assert np.allclose(xn, xn_ref, atol=1e-6)
        assert np.allclose(y, y_ref, atol=1e-6)
        gup = g.standard_normal((500, 8)).astype(np.float32)
        gv = _kernels.act_grad_from_y(y, gup, 0.2, act)
        gv_ref = gup * _kernels._np_act_grad_from_y(y_ref, act, 0.2)
        assert np.allclose(gv, gv_ref, atol=1e-6)
