"""Sanity checks of the loop references themselves against hand-computed
values and closed-form degenerate cases, so the parity tests elsewhere rest on
a verified second route."""

import math

import numpy as np
import pytest

from hardseg.oracles import (assd_reference, conv2d_reference, dsc_reference,
                             entropy_reference, finite_difference_grad,
                             hfd_reference, instance_norm_reference,
                             kl_map_reference, layer_norm_reference,
                             leaky_relu_reference, maxpool2x2_reference,
                             scan_reference, seg_loss_reference,
                             softmax_reference, upsample_nearest2x_reference)


def _scan_params(rng, e, n):
    return {
        "w_delta": rng.normal(size=(e, e)), "b_delta": rng.normal(size=e),
        "w_b": rng.normal(size=(n, e)), "b_b": rng.normal(size=n),
        "w_c": rng.normal(size=(n, e)), "b_c": rng.normal(size=n),
        "a_log": rng.normal(size=(e, n)), "d_skip": rng.normal(size=e),
    }


def test_entropy_hand_values():
    # uniform over 4: -sum(1/4 log 1/4)/log4 = 1; one-hot: 0
    probs = np.zeros((4, 1, 2))
    probs[:, 0, 0] = 0.25
    probs[0, 0, 1] = 1.0
    u = entropy_reference(probs)
    assert u[0, 0] == pytest.approx(1.0)
    assert u[0, 1] == 0.0
    # binary (0.5+p, 0.5-p) hand value
    p = np.array([[[0.8]], [[0.2]]])
    want = -(0.8 * math.log(0.8) + 0.2 * math.log(0.2)) / math.log(2)
    assert entropy_reference(p)[0, 0] == pytest.approx(want, abs=1e-15)


def test_scan_zero_input_matrix_is_skip_only():
    rng = np.random.default_rng(0)
    params = _scan_params(rng, e=3, n=2)
    params["w_b"] = np.zeros((2, 3))
    params["b_b"] = np.zeros(2)
    x = rng.normal(size=(5, 3))
    y = scan_reference(x, params, "forward")
    np.testing.assert_allclose(y, params["d_skip"] * x, atol=1e-15)


def test_scan_single_token_directions_agree():
    rng = np.random.default_rng(1)
    params = _scan_params(rng, e=4, n=3)
    x = rng.normal(size=(1, 4))
    np.testing.assert_array_equal(scan_reference(x, params, "forward"),
                                  scan_reference(x, params, "backward"))


def test_scan_backward_is_flip_forward_flip():
    rng = np.random.default_rng(2)
    params = _scan_params(rng, e=3, n=2)
    x = rng.normal(size=(6, 3))
    back = scan_reference(x, params, "backward")
    manual = scan_reference(x[::-1], params, "forward")[::-1]
    np.testing.assert_array_equal(back, manual)


def test_scan_one_step_hand_value():
    # E=N=1, all weights chosen so each piece is easy on paper
    params = {
        "w_delta": np.array([[0.0]]), "b_delta": np.array([0.0]),
        "w_b": np.array([[0.0]]), "b_b": np.array([1.0]),
        "w_c": np.array([[0.0]]), "b_c": np.array([2.0]),
        "a_log": np.array([[0.0]]), "d_skip": np.array([0.5]),
    }
    x = np.array([[3.0]])
    # delta = softplus(0) = log 2; A = -1; h = log2 * 1 * 3; y = 2h + 0.5*3
    delta = math.log(2.0)
    want = 2.0 * (delta * 3.0) + 1.5
    got = scan_reference(x, params, "forward")
    assert got[0, 0] == pytest.approx(want, abs=1e-15)
    # second identical token now decays the state by exp(-delta) = 1/2
    x2 = np.array([[3.0], [3.0]])
    h2 = math.exp(-delta) * (delta * 3.0) + delta * 3.0
    got2 = scan_reference(x2, params, "forward")
    assert got2[1, 0] == pytest.approx(2.0 * h2 + 1.5, abs=1e-14)


def test_layer_norm_hand_value():
    v = np.array([[1.0, 2.0, 3.0]])  # one token, E=3
    out = layer_norm_reference(v, np.ones(3), np.zeros(3))
    mean = 2.0
    var = 2.0 / 3.0
    want = (v - mean) / math.sqrt(var + 1e-5)
    np.testing.assert_allclose(out, want, atol=1e-15)
    # gamma/beta applied per component
    out2 = layer_norm_reference(v, np.array([2.0, 2.0, 2.0]),
                                np.array([1.0, 1.0, 1.0]))
    np.testing.assert_allclose(out2, 2.0 * want + 1.0, atol=1e-14)


def test_conv2d_identity_kernel():
    rng = np.random.default_rng(3)
    inp = rng.normal(size=(2, 5, 5))
    weight = np.zeros((2, 2, 3, 3))
    weight[0, 0, 1, 1] = 1.0
    weight[1, 1, 1, 1] = 1.0
    out = conv2d_reference(inp, weight, np.zeros(2))
    np.testing.assert_allclose(out, inp, atol=1e-15)


def test_conv2d_hand_sum():
    inp = np.arange(9, dtype=np.float64).reshape(1, 3, 3)
    weight = np.ones((1, 1, 3, 3))
    out = conv2d_reference(inp, weight, np.array([1.0]))
    # center tap: sum of all 9 entries + bias
    assert out[0, 1, 1] == pytest.approx(36.0 + 1.0)
    # corner: only the 2x2 in-bounds block contributes
    assert out[0, 0, 0] == pytest.approx(0 + 1 + 3 + 4 + 1.0)


def test_instance_norm_normalizes_per_channel():
    rng = np.random.default_rng(4)
    inp = rng.normal(loc=3.0, scale=2.0, size=(2, 6, 6))
    out = instance_norm_reference(inp, np.ones(2), np.zeros(2))
    for c in range(2):
        assert abs(out[c].mean()) < 1e-12
        assert out[c].var() == pytest.approx(1.0, abs=1e-4)  # eps bias


def test_leaky_relu_values():
    inp = np.array([-2.0, 0.0, 3.0])
    np.testing.assert_allclose(leaky_relu_reference(inp),
                               [-0.02, 0.0, 3.0], atol=1e-15)


def test_pool_and_upsample_hand_values():
    inp = np.array([[[1.0, 2.0], [3.0, 4.0]]])
    np.testing.assert_array_equal(maxpool2x2_reference(inp), [[[4.0]]])
    up = upsample_nearest2x_reference(np.array([[[7.0]]]))
    np.testing.assert_array_equal(up, np.full((1, 2, 2), 7.0))
    # upsample then pool returns the original for any input
    rng = np.random.default_rng(5)
    x = rng.normal(size=(3, 4, 4))
    np.testing.assert_array_equal(
        maxpool2x2_reference(upsample_nearest2x_reference(x)), x)


def test_softmax_reference_properties():
    rng = np.random.default_rng(6)
    logits = rng.normal(size=(4, 3, 3)) * 5
    probs = softmax_reference(logits)
    np.testing.assert_allclose(probs.sum(axis=0), 1.0, atol=1e-12)
    assert (probs > 0).all()
    # shift invariance
    np.testing.assert_allclose(softmax_reference(logits + 100.0), probs,
                               atol=1e-12)


def test_seg_loss_reference_hand_value():
    # a perfectly confident, correct 1-pixel prediction: CE -> 0, dice -> ~0
    probs = np.array([[[0.0]], [[1.0]]])
    labels = np.array([[1]])
    loss = seg_loss_reference(probs, labels, np.ones((1, 1), dtype=bool))
    # ce = 0.5 * -log(1) = 0 ; dice term: 1 - (2*1+s)/(2+s) with s=1e-5
    want = 0.5 * (1.0 - (2.0 + 1e-5) / (2.0 + 1e-5))
    assert loss == pytest.approx(want, abs=1e-12)


def test_hfd_reference_identical_maps_are_zero():
    rng = np.random.default_rng(7)
    raw = rng.dirichlet(np.ones(3), size=(4, 4)).transpose(2, 0, 1)
    labels = rng.integers(0, 3, (4, 4))
    hard = np.ones((4, 4), dtype=bool)
    m, l_m, l_d = hfd_reference(raw, raw, labels, hard)
    assert (m == 0).all()          # ties never set the direction bit
    assert l_m == pytest.approx(0.0, abs=1e-15)
    assert l_d == 0.0              # empty m-set mean


def test_hfd_reference_hand_computed_two_pixels():
    # pixel (0,0): seq confident-correct -> wins; pixel (0,1): deform wins
    p_seq = np.array([[[0.9, 0.2]], [[0.1, 0.8]]])
    p_def = np.array([[[0.6, 0.7]], [[0.4, 0.3]]])
    labels = np.array([[0, 0]])
    hard = np.ones((1, 2), dtype=bool)
    m, l_m, l_d = hfd_reference(p_seq, p_def, labels, hard)
    np.testing.assert_array_equal(m, [[1, 0]])
    kl = kl_map_reference(p_seq, p_def)
    assert l_d == pytest.approx(kl[0, 0], abs=1e-15)   # m=1 pixel set
    assert l_m == pytest.approx(kl[0, 1], abs=1e-15)   # keep set


def test_dsc_assd_reference_hand_values():
    pred = np.array([[1, 1], [0, 0]])
    gt = np.array([[1, 0], [1, 0]])
    assert dsc_reference(pred, gt, 1) == (0.5, False)
    assert dsc_reference(pred, gt, 2) == (1.0, True)
    a = np.zeros((1, 4), dtype=int)
    b = np.zeros((1, 4), dtype=int)
    a[0, 0] = 1
    b[0, 3] = 1
    assert assd_reference(a, b, 1) == pytest.approx(3.0)
    assert assd_reference(a, b, 1, spacing=(1.0, 2.0)) == pytest.approx(6.0)
    assert assd_reference(a, np.zeros_like(a), 1) is None


def test_finite_difference_grad_on_quadratic():
    rng = np.random.default_rng(8)
    a = rng.normal(size=(3, 3))
    x = rng.normal(size=3)

    def f(v):
        return float(v @ a @ v)

    grad = finite_difference_grad(f, x)
    want = (a + a.T) @ x
    np.testing.assert_allclose(grad, want, rtol=1e-6, atol=1e-8)


def test_finite_difference_grad_matches_shape():
    x = np.zeros((2, 2))
    grad = finite_difference_grad(lambda v: float((v**2).sum()), x)
    assert grad.shape == (2, 2)
    np.testing.assert_allclose(grad, 2 * x, atol=1e-8)
