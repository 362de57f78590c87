import numpy as np
import pytest

from mobiletl.layers import (
    ActBackwardMode, BatchNorm, BNMode, Conv2d, GlobalAvgPool, HardSigmoid,
    HardSwish, Linear, ReLU6, SEBlock, conv2d_backward, conv2d_forward,
    conv_out_size, hardsigmoid, hardswish, relu6, residual_add,
    softmax_cross_entropy,
)
from mobiletl.tensor import Tape, wrap


def naive_conv(x, w, groups, stride, padding):
    b, cin, h, wd = x.shape
    cout, cin_g, k, _ = w.shape
    ho = conv_out_size(h, k, stride, padding)
    wo = conv_out_size(wd, k, stride, padding)
    xp = np.pad(x, ((0, 0), (0, 0), (padding,) * 2, (padding,) * 2))
    out = np.zeros((b, cout, ho, wo))
    cpg = cout // groups
    for bi in range(b):
        for o in range(cout):
            g = o // cpg
            for i in range(ho):
                for j in range(wo):
                    patch = xp[bi, g * cin_g:(g + 1) * cin_g,
                               i * stride:i * stride + k,
                               j * stride:j * stride + k]
                    out[bi, o, i, j] = (patch * w[o]).sum()
    return out


@pytest.mark.parametrize("groups,stride,padding,k",
                         [(1, 1, 1, 3), (1, 2, 2, 5), (4, 1, 1, 3),
                          (2, 2, 0, 1), (8, 2, 2, 5)])
def test_conv_forward_matches_naive_loops(rng, groups, stride, padding, k):
    cin, cout = 8, 8
    x = rng.normal(size=(2, cin, 9, 9))
    w = rng.normal(size=(cout, cin // groups, k, k))
    got = conv2d_forward(x, w, groups, stride, padding)
    np.testing.assert_allclose(got, naive_conv(x, w, groups, stride, padding),
                               rtol=1e-10, atol=1e-10)


@pytest.mark.parametrize("h,k,stride,padding",
                         [(12, 5, 2, 2), (12, 3, 2, 1), (11, 5, 2, 2),
                          (7, 3, 1, 1), (10, 1, 2, 0)])
def test_conv_backward_matches_finite_differences(rng, h, k, stride, padding):
    x = rng.normal(size=(2, 3, h, h))
    w = rng.normal(size=(4, 3, k, k))
    y = conv2d_forward(x, w, 1, stride, padding)
    gy = rng.normal(size=y.shape)
    gx, gw = conv2d_backward(gy, x, w, 1, stride, padding, True, in_hw=(h, h))
    assert gx.shape == x.shape
    eps = 1e-6
    for idx in [(0, 0, 0, 0), (1, 2, h - 1, h - 1), (0, 1, h // 2, 1)]:
        x2 = x.copy()
        x2[idx] += eps
        fd = ((conv2d_forward(x2, w, 1, stride, padding) - y) * gy).sum() / eps
        assert abs(fd - gx[idx]) <= 1e-4 * max(1.0, abs(fd))
    w2 = w.copy()
    w2[0, 0, 0, 0] += eps
    fd = ((conv2d_forward(x, w2, 1, stride, padding) - y) * gy).sum() / eps
    assert abs(fd - gw[0, 0, 0, 0]) <= 1e-4 * max(1.0, abs(fd))


def test_activation_reference_values():
    a = np.array([-4.0, -3.0, -1.0, 0.0, 3.0, 6.0, 7.0])
    np.testing.assert_allclose(relu6(a), [0, 0, 0, 0, 3, 6, 6])
    np.testing.assert_allclose(hardsigmoid(a),
                               [0, 0, 1 / 3, 0.5, 1, 1, 1])
    np.testing.assert_allclose(hardswish(a), a * hardsigmoid(a))


def _act_grad(cls, mode, a):
    layer = cls("act", mode)
    tape = Tape()
    layer.forward(wrap(a.astype(np.float32)), tape, training=True)
    g = np.ones_like(a, dtype=np.float32)
    for node in reversed(tape.nodes):
        g = node.backward(g, {})
    return g


def test_relu6_exact_backward_uses_inside_band():
    a = np.array([-1.0, 0.0, 3.0, 6.0, 8.0])
    g = _act_grad(ReLU6, ActBackwardMode.Exact, a)
    np.testing.assert_allclose(g, [0, 1, 1, 1, 0])


def test_relu6_approx_backward_uses_sign_only():
    a = np.array([-1.0, 0.0, 3.0, 6.0, 8.0])
    g = _act_grad(ReLU6, ActBackwardMode.ApproxSigned, a)
    np.testing.assert_allclose(g, [0, 1, 1, 1, 1])


def test_hardswish_exact_backward_formula():
    a = np.array([-4.0, -2.0, 0.0, 2.0, 4.0])
    g = _act_grad(HardSwish, ActBackwardMode.Exact, a)
    expected = relu6(a + 3) / 6 + a * ((a >= -3) & (a <= 3)) / 6
    np.testing.assert_allclose(g, expected, rtol=1e-6)


def test_hardswish_approx_backward_is_indicator():
    a = np.array([-4.0, -2.0, 0.0, 2.0, 4.0])
    g = _act_grad(HardSwish, ActBackwardMode.ApproxSigned, a)
    np.testing.assert_allclose(g, [0, 0, 1, 1, 1])


def test_hardsigmoid_backward_formula():
    a = np.array([-4.0, -2.0, 0.0, 2.0, 4.0])
    layer = HardSigmoid("act")
    tape = Tape()
    layer.forward(wrap(a.astype(np.float32)), tape, training=True)
    g = np.ones_like(a, dtype=np.float32)
    for node in reversed(tape.nodes):
        g = node.backward(g, {})
    np.testing.assert_allclose(g, [0, 1 / 6, 1 / 6, 1 / 6, 0], rtol=1e-6)


def test_bn_saves_nothing_in_eval_modes(rng):
    x = wrap(rng.normal(size=(2, 4, 5, 5)).astype(np.float32))
    for mode in (BNMode.ShiftOnly, BNMode.Frozen):
        bn = BatchNorm("bn", 4, mode)
        tape = Tape()
        bn.forward(x, tape, training=True)
        assert tape.saved_bytes() == 0


def test_bn_full_training_normalizes_batch(rng):
    bn = BatchNorm("bn", 4)
    x = wrap(rng.normal(loc=3.0, scale=2.0,
                        size=(4, 4, 6, 6)).astype(np.float32))
    y = bn.forward(x, Tape(), training=True)
    np.testing.assert_allclose(y.data.mean(axis=(0, 2, 3)), 0, atol=1e-5)
    np.testing.assert_allclose(y.data.std(axis=(0, 2, 3)), 1, atol=1e-3)


def test_bn_running_stats_update(rng):
    bn = BatchNorm("bn", 2)
    x = wrap(rng.normal(loc=5.0, size=(8, 2, 4, 4)).astype(np.float32))
    before = bn.mu.copy()
    bn.forward(x, Tape(), training=True)
    assert not np.array_equal(bn.mu, before)


def test_frozen_conv_saves_nothing(rng):
    w = rng.normal(size=(4, 4, 3, 3)).astype(np.float32)
    conv = Conv2d("c", w, groups=1, stride=1, padding=1, trainable=False)
    tape = Tape()
    conv.forward(wrap(rng.normal(size=(1, 4, 5, 5)).astype(np.float32)),
                 tape, training=True)
    assert tape.saved_bytes() == 0


def test_residual_add_sums_branches():
    a = wrap(np.ones((1, 2, 2, 2), dtype=np.float32))
    b = wrap(2 * np.ones((1, 2, 2, 2), dtype=np.float32))
    out = residual_add(a, b)
    np.testing.assert_allclose(out.data, 3.0)


def test_softmax_ce_matches_log_sum_exp(rng):
    logits = wrap(rng.normal(size=(4, 5)).astype(np.float32))
    labels = np.array([0, 3, 2, 4])
    tape = Tape()
    loss = softmax_cross_entropy(logits, labels, tape)
    z = logits.data.astype(np.float64)
    ref = np.mean(np.log(np.exp(z).sum(axis=1)) - z[np.arange(4), labels])
    assert abs(float(loss.data.ravel()[0]) - ref) < 1e-5


def test_softmax_ce_gradient_is_probs_minus_onehot(rng):
    logits = wrap(rng.normal(size=(3, 4)).astype(np.float32))
    labels = np.array([1, 0, 2])
    tape = Tape()
    loss = softmax_cross_entropy(logits, labels, tape)
    grads = {}
    g = np.ones(1, dtype=np.float32)
    for node in reversed(tape.nodes):
        g = node.backward(g, grads)
    z = logits.data.astype(np.float64)
    p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    p[np.arange(3), labels] -= 1
    np.testing.assert_allclose(g, p / 3, rtol=1e-4, atol=1e-6)


def test_se_block_forward_gates_channels(rng):
    se = SEBlock("se", 8, 2, rng)
    x = rng.normal(size=(2, 8, 4, 4)).astype(np.float32)
    y = se.forward(wrap(x), Tape(), training=True)
    pooled = x.mean(axis=(2, 3))
    z1 = np.maximum(pooled @ se.w1.T + se.b1, 0)
    gate = hardsigmoid(z1 @ se.w2.T + se.b2)
    np.testing.assert_allclose(y.data, x * gate[:, :, None, None], rtol=1e-4)


def test_linear_and_gap_forward(rng):
    gap = GlobalAvgPool("gap")
    x = rng.normal(size=(2, 3, 4, 4)).astype(np.float32)
    p = gap.forward(wrap(x), Tape(), training=True)
    np.testing.assert_allclose(p.data, x.mean(axis=(2, 3)), rtol=1e-6)
    w = rng.normal(size=(5, 3)).astype(np.float32)
    b = rng.normal(size=5).astype(np.float32)
    lin = Linear("fc", w, b)
    y = lin.forward(p, Tape(), training=True)
    np.testing.assert_allclose(y.data, p.data @ lin.weight.T + lin.bias,
                               rtol=1e-5)
