import numpy as np
import pytest
from oracles import conv2d_reference, dihedral_reference, numerical_gradient, relative_error

from texseg import ops
from texseg.errors import ParameterError, ShapeError
from texseg.ops import ConvParams, NormParams
from texseg.rng import substream

FD_TOL = 1e-6


def make_norm(c, eps=1e-5, dtype=np.float64, rng=None):
    if rng is None:
        return NormParams(gamma=np.ones(c, dtype), beta=np.zeros(c, dtype), eps=eps)
    return NormParams(
        gamma=(0.5 + rng.random(c)).astype(dtype),
        beta=rng.standard_normal(c).astype(dtype),
        eps=eps,
    )


# ---------------------------------------------------------------- convolution


def test_delta_kernel_is_identity():
    rng = substream(1, "x")
    x = rng.standard_normal((1, 6, 7)).astype(np.float32)
    w = np.zeros((1, 1, 3, 3), dtype=np.float32)
    w[0, 0, 1, 1] = 1.0
    for d in (1, 2, 5):
        p = ConvParams(weights=w, bias=np.zeros(1, dtype=np.float32), dilation=d)
        assert np.allclose(ops.dilated_conv2d_forward(x, p), x)


def test_ones_kernel_counts_inbounds_taps():
    x = np.ones((1, 5, 5), dtype=np.float32)
    p = ConvParams(
        weights=np.ones((1, 1, 3, 3), dtype=np.float32),
        bias=np.zeros(1, dtype=np.float32),
        dilation=2,
    )
    out = ops.dilated_conv2d_forward(x, p)
    assert out[0, 2, 2] == 9.0
    assert out[0, 0, 0] == 4.0


@pytest.mark.parametrize("dilation", [1, 2, 3, 5])
def test_conv_matches_nested_loop_reference(dilation):
    rng = substream(7, "conv", dilation)
    x = rng.standard_normal((2, 7, 7))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    got = ops.dilated_conv2d_forward(x, ConvParams(w, b, dilation))
    want = conv2d_reference(x, w, b, dilation)
    assert np.abs(got - want).max() <= 1e-6


def test_conv_d1_equals_plain_3x3():
    rng = substream(8, "plain")
    x = rng.standard_normal((2, 6, 5))
    w = rng.standard_normal((4, 2, 3, 3))
    got = ops.dilated_conv2d_forward(x, ConvParams(w, None, 1))
    assert np.abs(got - conv2d_reference(x, w, None, 1)).max() <= 1e-6


def test_conv_dihedral_equivariance_exact():
    # integer-valued data keeps every float sum exact, so the group identity
    # rot(conv(x, w)) == conv(rot(x), rot(w)) must hold bitwise
    rng = substream(9, "dihedral")
    x = rng.integers(-8, 9, size=(2, 5, 6)).astype(np.float32)
    w = rng.integers(-4, 5, size=(3, 2, 3, 3)).astype(np.float32)
    for dilation in (1, 2):
        for op in range(8):
            p = ConvParams(w, None, dilation)
            lhs = dihedral_reference(ops.dilated_conv2d_forward(x, p), op)
            p_rot = ConvParams(dihedral_reference(w, op), None, dilation)
            rhs = ops.dilated_conv2d_forward(dihedral_reference(x, op), p_rot)
            assert np.array_equal(lhs, rhs), f"op {op}, D {dilation}"


def test_conv_shape_and_parameter_errors():
    x = np.zeros((2, 4, 4), dtype=np.float32)
    w = np.zeros((3, 5, 3, 3), dtype=np.float32)
    with pytest.raises(ShapeError):
        ops.dilated_conv2d_forward(x, ConvParams(w, None, 1))
    with pytest.raises(ParameterError):
        ops.dilated_conv2d_forward(x, ConvParams(np.zeros((3, 2, 3, 3), dtype=np.float32), None, 0))


def test_conv_backward_zero_grad():
    rng = substream(10, "zg")
    x = rng.standard_normal((2, 5, 5))
    p = ConvParams(rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3), 2)
    gx, gw, gb = ops.dilated_conv2d_backward(x, p, np.zeros((3, 5, 5)))
    assert not gx.any() and not gw.any() and not gb.any()


def test_conv_backward_single_tap_chain_rule():
    x = np.array([[[2.0]]])
    w = substream(11, "w").standard_normal((1, 1, 3, 3))
    p = ConvParams(w, np.zeros(1), 1)
    g = np.array([[[3.0]]])
    gx, gw, gb = ops.dilated_conv2d_backward(x, p, g)
    assert gw[0, 0, 1, 1] == pytest.approx(2.0 * 3.0)
    center_mask = np.zeros((3, 3), bool)
    center_mask[1, 1] = True
    assert not gw[0, 0][~center_mask].any()
    assert gx[0, 0, 0] == pytest.approx(w[0, 0, 1, 1] * 3.0)
    assert gb[0] == pytest.approx(3.0)


@pytest.mark.parametrize("dilation", [1, 3])
def test_conv_backward_matches_finite_differences(dilation):
    rng = substream(12, "fd", dilation)
    x = rng.standard_normal((2, 5, 6))
    p = ConvParams(rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3), dilation)
    proj = rng.standard_normal((3, 5, 6))

    def loss():
        return float((ops.dilated_conv2d_forward(x, p) * proj).sum())

    gx, gw, gb = ops.dilated_conv2d_backward(x, p, proj)
    assert relative_error(gx, numerical_gradient(loss, x)) <= FD_TOL
    assert relative_error(gw, numerical_gradient(loss, p.weights)) <= FD_TOL
    assert relative_error(gb, numerical_gradient(loss, p.bias)) <= FD_TOL


def test_conv1x1_identity_weights():
    rng = substream(13, "c11")
    x = rng.standard_normal((4, 3, 5)).astype(np.float32)
    w = np.eye(4, dtype=np.float32).reshape(4, 4, 1, 1)
    p = ConvParams(w, np.zeros(4, dtype=np.float32), 1)
    assert np.allclose(ops.conv1x1_forward(x, p), x)


def test_conv1x1_is_matrix_vector_product_on_single_pixel():
    rng = substream(14, "mv")
    x = rng.standard_normal((321, 1, 1))
    w = rng.standard_normal((128, 321, 1, 1))
    b = rng.standard_normal(128)
    got = ops.conv1x1_forward(x, ConvParams(w, b, 1))[:, 0, 0]
    want = w.reshape(128, 321) @ x[:, 0, 0] + b
    assert np.allclose(got, want, atol=1e-12)


def test_conv1x1_backward_matches_finite_differences():
    rng = substream(15, "c11fd")
    x = rng.standard_normal((3, 4, 4))
    p = ConvParams(rng.standard_normal((2, 3, 1, 1)), rng.standard_normal(2), 1)
    proj = rng.standard_normal((2, 4, 4))

    def loss():
        return float((ops.conv1x1_forward(x, p) * proj).sum())

    gx, gw, gb = ops.conv1x1_backward(x, p, proj)
    assert relative_error(gx, numerical_gradient(loss, x)) <= FD_TOL
    assert relative_error(gw, numerical_gradient(loss, p.weights)) <= FD_TOL
    assert relative_error(gb, numerical_gradient(loss, p.bias)) <= FD_TOL


def test_conv1x1_oracle():
    rng = substream(16, "c11o")
    x = rng.standard_normal((3, 4, 5))
    w = rng.standard_normal((2, 3, 1, 1))
    b = rng.standard_normal(2)
    got = ops.conv1x1_forward(x, ConvParams(w, b, 1))
    assert np.abs(got - conv2d_reference(x, w, b, 1)).max() <= 1e-6


# ------------------------------------------------------------- instance norm


def test_instance_norm_constant_channel_maps_to_zero():
    x = np.full((1, 4, 4), 5.0, dtype=np.float32)
    y = ops.instance_norm_forward(x, make_norm(1, dtype=np.float32))
    assert np.allclose(y, 0.0)


def test_instance_norm_fixed_point():
    x = np.array([[[-1.0, 1.0]]])
    y = ops.instance_norm_forward(x, make_norm(1, eps=1e-12))
    assert np.allclose(y, x, atol=1e-6)


def test_instance_norm_affine_invariance():
    # holds to 1e-5 only when the input variance dwarfs eps
    rng = substream(17, "aff")
    x = (rng.standard_normal((3, 9, 9)) * 100.0).astype(np.float64)
    p = make_norm(3, rng=rng)
    base = ops.instance_norm_forward(x, p)
    for a, b in [(0.1, 3.0), (2.0, -40.0), (10.0, 500.0)]:
        shifted = ops.instance_norm_forward(a * x + b, p)
        assert np.abs(shifted - base).max() <= 1e-5


def test_instance_norm_output_statistics():
    rng = substream(18, "stats")
    x = rng.standard_normal((4, 8, 8)) * 3.0
    y = ops.instance_norm_forward(x, make_norm(4))
    assert np.abs(y.mean(axis=(1, 2))).max() <= 1e-5
    assert np.abs(y.var(axis=(1, 2)) - 1.0).max() <= 1e-3


def test_instance_norm_backward_zero_grad():
    rng = substream(19, "inz")
    x = rng.standard_normal((2, 3, 3))
    gx, gg, gb = ops.instance_norm_backward(x, make_norm(2), np.zeros_like(x))
    assert not gx.any() and not gg.any() and not gb.any()


def test_instance_norm_gamma_gradient_definition():
    rng = substream(20, "ing")
    x = rng.standard_normal((2, 4, 4))
    p = make_norm(2, rng=rng)
    g = rng.standard_normal(x.shape)
    _, gg, gb = ops.instance_norm_backward(x, p, g)
    mean = x.mean(axis=(1, 2), keepdims=True)
    xhat = (x - mean) / np.sqrt(x.var(axis=(1, 2), keepdims=True) + p.eps)
    assert np.allclose(gg, (g * xhat).sum(axis=(1, 2)))
    assert np.allclose(gb, g.sum(axis=(1, 2)))


def test_instance_norm_backward_matches_finite_differences():
    rng = substream(21, "infd")
    x = rng.standard_normal((2, 5, 5))
    p = make_norm(2, rng=rng)
    proj = rng.standard_normal(x.shape)

    def loss():
        return float((ops.instance_norm_forward(x, p) * proj).sum())

    gx, gg, gb = ops.instance_norm_backward(x, p, proj)
    assert relative_error(gx, numerical_gradient(loss, x)) <= FD_TOL
    assert relative_error(gg, numerical_gradient(loss, p.gamma)) <= FD_TOL
    assert relative_error(gb, numerical_gradient(loss, p.beta)) <= FD_TOL


# --------------------------------------------------------- norm-skip block


def test_norm_skip_block_passes_constant_positive_channel():
    x = np.full((1, 3, 3), 4.5, dtype=np.float32)
    y = ops.norm_skip_block_forward(x, make_norm(1, dtype=np.float32))
    assert np.allclose(y, 4.5)


def test_norm_skip_block_dead_zone():
    # both branches nonpositive: constant negative channel normalizes to 0
    x = np.full((1, 3, 3), -2.0, dtype=np.float32)
    y = ops.norm_skip_block_forward(x, make_norm(1, dtype=np.float32))
    assert np.all(y == 0.0)


def test_norm_skip_block_backward_matches_finite_differences():
    rng = substream(22, "blk")
    x = rng.standard_normal((3, 5, 5)) + 0.5
    p = make_norm(3, rng=rng)
    # keep preactivations away from the ReLU kink so differences are smooth
    s = x + ops.instance_norm_forward(x, p)
    assert np.abs(s).min() > 1e-3
    proj = rng.standard_normal(x.shape)

    def loss():
        return float((ops.norm_skip_block_forward(x, p) * proj).sum())

    gx, gg, gb = ops.norm_skip_block_backward(x, p, proj)
    assert relative_error(gx, numerical_gradient(loss, x)) <= FD_TOL
    assert relative_error(gg, numerical_gradient(loss, p.gamma)) <= FD_TOL
    assert relative_error(gb, numerical_gradient(loss, p.beta)) <= FD_TOL


def test_norm_skip_block_is_not_affine_invariant():
    rng = substream(23, "noninv")
    x = rng.standard_normal((2, 6, 6)) * 10.0
    p = make_norm(2)
    base = ops.norm_skip_block_forward(x, p)
    scaled = ops.norm_skip_block_forward(3.0 * x + 1.0, p)
    assert np.abs(scaled - base).max() > 1e-3


# ------------------------------------------------------------------- relu


def test_relu_values_and_mask():
    x = np.array([[[-3.0, 0.0, 4.0]]])
    assert np.array_equal(ops.relu_forward(x), np.array([[[0.0, 0.0, 4.0]]]))
    g = np.ones_like(x)
    assert np.array_equal(ops.relu_backward(x, g), np.array([[[0.0, 0.0, 1.0]]]))


def test_relu_backward_matches_finite_differences_away_from_zero():
    rng = substream(24, "relu")
    x = rng.standard_normal((2, 4, 4))
    x[np.abs(x) < 0.05] = 0.1
    proj = rng.standard_normal(x.shape)

    def loss():
        return float((ops.relu_forward(x) * proj).sum())

    assert relative_error(ops.relu_backward(x, proj), numerical_gradient(loss, x)) <= FD_TOL


# ---------------------------------------------------------------- dropout


def test_dropout_rate_zero_and_eval():
    rng = substream(25, "drop")
    x = rng.standard_normal((2, 3, 3)).astype(np.float32)
    y, mask = ops.dropout_forward(x, 0.0, "train", rng)
    assert np.array_equal(y, x) and mask.all()
    y, mask = ops.dropout_forward(x, 0.9, "eval")
    assert np.array_equal(y, x) and mask.all()


def test_dropout_statistics():
    rng = substream(26, "dropstats")
    x = np.ones((100, 100, 100), dtype=np.float32)
    y, mask = ops.dropout_forward(x, 0.5, "train", rng)
    assert 0.99 <= float(y.mean()) <= 1.01
    keep_fraction = float(mask.mean())
    assert 0.498 <= keep_fraction <= 0.502


def test_dropout_invalid_rate():
    x = np.ones((2, 2), dtype=np.float32)
    for rate in (-0.1, 1.0, 1.5):
        with pytest.raises(ParameterError):
            ops.dropout_forward(x, rate, "train", substream(0, "r"))


def test_dropout_backward_uses_mask():
    rng = substream(27, "dbk")
    x = rng.standard_normal((4, 4)).astype(np.float32)
    y, mask = ops.dropout_forward(x, 0.5, "train", rng)
    g = np.ones_like(x)
    gx = ops.dropout_backward(mask, 0.5, g)
    assert np.array_equal(gx, mask * 2.0)


# ------------------------------------------------------------------ concat


def test_concat_single_is_identity():
    x = substream(28, "cc").standard_normal((3, 4, 4)).astype(np.float32)
    assert np.array_equal(ops.concat_channels([x]), x)


def test_concat_reaches_321_channels():
    parts = [np.zeros((1, 4, 4), dtype=np.float32)]
    parts += [np.zeros((32, 4, 4), dtype=np.float32) for _ in range(10)]
    assert ops.concat_channels(parts).shape == (321, 4, 4)


def test_concat_mismatched_spatial_size():
    with pytest.raises(ShapeError):
        ops.concat_channels([np.zeros((1, 4, 4), np.float32), np.zeros((1, 5, 4), np.float32)])


def test_split_inverts_concat():
    rng = substream(29, "split")
    parts = [rng.standard_normal((c, 3, 3)) for c in (1, 4, 2)]
    back = ops.split_channels(ops.concat_channels(parts), [1, 4, 2])
    for a, b in zip(parts, back):
        assert np.array_equal(a, b)


# ----------------------------------------------------------------- softmax


def test_softmax_uniform_on_zero_logits():
    probs = ops.softmax_channels(np.zeros((6, 2, 2), dtype=np.float32))
    assert np.allclose(probs, 1.0 / 6.0)


def test_softmax_handles_huge_logits():
    probs = ops.softmax_channels(np.full((4, 1, 1), 1000.0, dtype=np.float32))
    assert np.allclose(probs, 0.25)
    assert np.isfinite(probs).all()


def test_softmax_sums_and_shift_invariance():
    rng = substream(30, "sm")
    x = rng.standard_normal((5, 3, 4))
    probs = ops.softmax_channels(x)
    assert np.abs(probs.sum(axis=0) - 1.0).max() <= 1e-6
    shifted = ops.softmax_channels(x + 17.0)
    assert np.allclose(probs, shifted, atol=1e-12)


def test_softmax_backward_matches_finite_differences():
    rng = substream(31, "smfd")
    x = rng.standard_normal((4, 3, 3))
    proj = rng.standard_normal(x.shape)

    def loss():
        return float((ops.softmax_channels(x) * proj).sum())

    probs = ops.softmax_channels(x)
    analytic = ops.softmax_backward(probs, proj)
    assert relative_error(analytic, numerical_gradient(loss, x)) <= FD_TOL


def test_log_softmax_consistent_with_softmax():
    rng = substream(32, "ls")
    x = rng.standard_normal((5, 2, 2))
    assert np.allclose(np.exp(ops.log_softmax_channels(x)), ops.softmax_channels(x), atol=1e-12)
