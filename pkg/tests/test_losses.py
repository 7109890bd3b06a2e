import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from dualloss.errors import DegenerateInputError, LabelError, ParameterError
from dualloss.losses import (ArcFaceParams, ClassCenters, DualLossConfig, arcface_logits, arcface_loss,
                             center_loss, cosine_logits, cross_entropy, dual_loss, margin_branch_mask,
                             update_centers)


def fd_grad(f, x, h=1e-6):
    """Plain central differences, written independently of dualloss.optim."""
    g = np.zeros_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        g.flat[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def rel_err(a, n):
    return np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), 1e-8)


def unit(theta):
    return np.array([math.cos(theta), math.sin(theta)])


# --- cross-entropy ---------------------------------------------------------

def test_ce_symmetric_case():
    out = cross_entropy(np.zeros((1, 2)), [0])
    assert out.loss == pytest.approx(math.log(2), abs=1e-15)
    assert np.allclose(out.grad_logits, [[-0.5, 0.5]])


def test_ce_saturated():
    assert cross_entropy(np.array([[30.0, -30.0]]), [0]).loss == pytest.approx(0.0, abs=1e-25)


def test_ce_gradient_fd(rng):
    z = rng.normal(size=(4, 6))
    y = np.array([0, 5, 2, 2])
    out = cross_entropy(z, y)
    assert rel_err(out.grad_logits, fd_grad(lambda v: cross_entropy(v, y).loss, z)) < 1e-6


def test_ce_bad_labels():
    with pytest.raises(LabelError):
        cross_entropy(np.zeros((2, 3)), [0, 3])
    with pytest.raises(LabelError):
        cross_entropy(np.zeros((1, 3)), [-1])


# --- ArcFace ---------------------------------------------------------------

def test_zero_margin_is_plain_cosine(rng):
    e, w = rng.normal(size=(5, 7)), rng.normal(size=(3, 7))
    y = rng.integers(0, 3, 5)
    got = arcface_logits(e, w, y, ArcFaceParams(scale=4.0, margin=0.0))
    en = e / np.linalg.norm(e, axis=1, keepdims=True)
    wn = w / np.linalg.norm(w, axis=1, keepdims=True)
    assert np.allclose(got, 4.0 * en @ wn.T, rtol=0, atol=1e-12)
    assert np.allclose(got, cosine_logits(e, w, 4.0), rtol=0, atol=1e-12)


def test_aligned_target_table2_values():
    # theta = 0 is clamped to cos = 1 - 1e-7; cos(acos(1 - 1e-7) + 0.5) is within 3e-4 of cos 0.5
    z = arcface_logits(np.array([[2.0, 0.0]]), np.array([[1.0, 0.0], [0.0, 1.0]]), [0], ArcFaceParams(30, 0.5))
    assert z[0, 0] == pytest.approx(30 * math.cos(0.5), abs=1e-2)
    assert 30 * math.cos(0.5) == pytest.approx(26.327, abs=5e-4)
    assert z[0, 1] == pytest.approx(0.0, abs=1e-12)


def test_margin_branch_at_interior_angle():
    theta, m = 1.0, 0.5
    z = arcface_logits(unit(theta)[None], np.array([[1.0, 0.0]]), [0], ArcFaceParams(1.0, m))
    assert z[0, 0] == pytest.approx(math.cos(theta + m), abs=1e-14)


def test_fallback_branch_past_switch():
    theta, m = 3.0, 0.5
    assert theta > math.pi - m
    params = ArcFaceParams(1.0, m)
    z = arcface_logits(unit(theta)[None], np.array([[1.0, 0.0]]), [0], params)
    fallback = math.cos(theta) - m * math.sin(m)
    folded = math.cos(theta + m)
    assert z[0, 0] == pytest.approx(fallback, abs=1e-14)
    assert abs(fallback - folded) > 1e-2
    assert not margin_branch_mask(unit(theta)[None], np.array([[1.0, 0.0]]), [0], params)[0]


def test_arcface_direct_softmax_value():
    out = arcface_loss(np.array([[1.0, 0.0]]), np.eye(2), [0], ArcFaceParams(1.0, 0.0))
    # clamp moves cos 1 to 1 - 1e-7, shifting the loss by about 3e-8
    assert out.loss == pytest.approx(-math.log(math.e / (math.e + 1)), abs=1e-7)
    assert out.loss == pytest.approx(0.3133, abs=1e-4)


def test_margin_increases_loss(rng):
    e = rng.normal(size=(4, 6))
    w = rng.normal(size=(3, 6))
    y = np.array([0, 1, 2, 0])
    lo = arcface_loss(e, w, y, ArcFaceParams(30, 0.0)).loss
    hi = arcface_loss(e, w, y, ArcFaceParams(30, 0.5)).loss
    assert hi > lo


def test_arcface_gradients_fd(rng):
    e, w = rng.normal(size=(4, 8)), rng.normal(size=(6, 8))
    y = np.array([0, 3, 5, 3])
    p = ArcFaceParams(30, 0.5)
    out = arcface_loss(e, w, y, p)
    assert rel_err(out.grad_embeddings, fd_grad(lambda v: arcface_loss(v, w, y, p).loss, e)) < 1e-4
    assert rel_err(out.grad_weights, fd_grad(lambda v: arcface_loss(e, v, y, p).loss, w)) < 1e-4


def test_fallback_branch_gradient_fd():
    e = np.array([[math.cos(2.9), math.sin(2.9), 0.1]])
    w = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    p = ArcFaceParams(5.0, 0.5)
    assert not margin_branch_mask(e, w, [0], p)[0]
    out = arcface_loss(e, w, [0], p)
    assert rel_err(out.grad_embeddings, fd_grad(lambda v: arcface_loss(v, w, [0], p).loss, e)) < 1e-6


def test_arcface_degenerate_row():
    with pytest.raises(DegenerateInputError):
        arcface_loss(np.zeros((1, 3)), np.eye(3), [0], ArcFaceParams())


def test_arcface_params_validation():
    with pytest.raises(ParameterError):
        ArcFaceParams(scale=0.0)
    with pytest.raises(ParameterError):
        ArcFaceParams(margin=math.pi)
    assert ArcFaceParams().scale == 30 and ArcFaceParams().margin == 0.5


@given(st.integers(0, 2**31), st.floats(0.1, 100))
@settings(max_examples=50)
def test_argmax_invariant_to_scale(seed, s):
    r = np.random.default_rng(seed)
    e, w = r.normal(size=(6, 5)), r.normal(size=(4, 5))
    y = r.integers(0, 4, 6)
    a = np.argmax(arcface_logits(e, w, y, ArcFaceParams(1.0, 0.0)), axis=1)
    b = np.argmax(arcface_logits(e, w, y, ArcFaceParams(s, 0.0)), axis=1)
    assert np.array_equal(a, b)


# --- Center loss -----------------------------------------------------------

def test_center_loss_zero_case(rng):
    c = rng.normal(size=(3, 4))
    y = np.array([0, 2, 2, 1])
    out = center_loss(c[y], ClassCenters(c), y)
    assert out.loss == 0.0 and not out.grad_embeddings.any()


def test_center_loss_unit_displacement():
    out = center_loss(np.array([[1.0, 0.0]]), ClassCenters(np.zeros((1, 2))), [0])
    assert out.loss == 1.0
    assert np.array_equal(out.grad_embeddings, [[2.0, 0.0]])


def test_center_loss_gradient_fd(rng):
    e = rng.normal(size=(8, 5))
    cen = ClassCenters(rng.normal(size=(3, 5)))
    y = rng.integers(0, 3, 8)
    out = center_loss(e, cen, y)
    assert rel_err(out.grad_embeddings, fd_grad(lambda v: center_loss(v, cen, y).loss, e)) < 1e-6


def test_center_loss_bad_label():
    with pytest.raises(LabelError):
        center_loss(np.ones((1, 2)), ClassCenters(np.zeros((2, 2))), [2])


@given(st.integers(0, 2**31))
@settings(max_examples=50)
def test_center_loss_nonnegative(seed):
    r = np.random.default_rng(seed)
    e = r.normal(size=(5, 3))
    assert center_loss(e, ClassCenters(r.normal(size=(2, 3))), r.integers(0, 2, 5)).loss >= 0


def test_update_hand_example():
    new = update_centers(ClassCenters(np.zeros((1, 2)), 0.5), np.array([[1.0, 0.0]]), [0])
    # delta = (0 - 1) / (1 + 1) = -0.5; c <- 0 - 0.5 * -0.5
    assert np.array_equal(new.centers, [[0.25, 0.0]])


def test_update_absent_class_unchanged(rng):
    c = rng.normal(size=(3, 2))
    new = update_centers(ClassCenters(c), rng.normal(size=(4, 2)), [0, 0, 2, 2])
    assert np.array_equal(new.centers[1], c[1])
    assert not np.array_equal(new.centers[0], c[0])


def test_update_does_not_mutate(rng):
    c = rng.normal(size=(2, 2))
    cen = ClassCenters(c.copy())
    update_centers(cen, rng.normal(size=(3, 2)), [0, 1, 1])
    assert np.array_equal(cen.centers, c)


@given(st.integers(0, 2**31), st.floats(0.01, 1.0))
@settings(max_examples=100)
def test_update_contracts_toward_batch_mean(seed, beta):
    r = np.random.default_rng(seed)
    e = r.normal(size=(6, 3))
    y = r.integers(0, 3, 6)
    cen = ClassCenters(r.normal(size=(3, 3)) * 5, beta)
    new = update_centers(cen, e, y)
    for k in np.unique(y):
        mean = e[y == k].mean(axis=0)
        assert np.linalg.norm(new.centers[k] - mean) <= np.linalg.norm(cen.centers[k] - mean) + 1e-12


def test_centers_validation():
    with pytest.raises(ParameterError):
        ClassCenters(np.zeros((2, 2)), rate=0.0)
    z = ClassCenters.zeros(6, 256)
    assert z.centers.shape == (6, 256) and not z.centers.any() and z.rate == 0.5


# --- dual loss -------------------------------------------------------------

def test_dual_alpha_zero_is_arcface(rng):
    e, w = rng.normal(size=(3, 4)), rng.normal(size=(2, 4))
    y = np.array([0, 1, 1])
    p = ArcFaceParams()
    arc = arcface_loss(e, w, y, p)
    dual = dual_loss(e, w, y, p, ClassCenters(rng.normal(size=(2, 4))), DualLossConfig(0.0))
    assert dual.loss == arc.loss
    assert np.array_equal(dual.grad_embeddings, arc.grad_embeddings)
    assert np.array_equal(dual.grad_weights, arc.grad_weights)


def test_dual_additivity_known_values():
    e = np.array([[1.0, 0.0]])
    out = dual_loss(e, np.eye(2), [0], ArcFaceParams(1.0, 0.0), ClassCenters(np.zeros((2, 2))),
                    DualLossConfig(0.5))
    assert out.components["arc"] == pytest.approx(0.3133, abs=1e-4)
    assert out.components["center"] == 1.0
    assert out.loss == pytest.approx(0.8133, abs=1e-4)
    assert out.loss == out.components["arc"] + 0.5 * out.components["center"]


def test_dual_default_alpha():
    assert DualLossConfig().alpha == 0.5
    with pytest.raises(ParameterError):
        DualLossConfig(-0.1)


@given(st.integers(0, 2**31), st.floats(0.0, 2.0))
@settings(max_examples=50)
def test_dual_gradient_additivity_exact(seed, alpha):
    r = np.random.default_rng(seed)
    e, w = r.normal(size=(4, 5)), r.normal(size=(3, 5))
    y = r.integers(0, 3, 4)
    cen = ClassCenters(r.normal(size=(3, 5)))
    p = ArcFaceParams(30, 0.5)
    dual = dual_loss(e, w, y, p, cen, DualLossConfig(alpha))
    arc, ctr = arcface_loss(e, w, y, p), center_loss(e, cen, y)
    assert np.array_equal(dual.grad_embeddings, arc.grad_embeddings + alpha * ctr.grad_embeddings)
    assert np.array_equal(dual.grad_weights, arc.grad_weights)


@given(st.integers(0, 2**31))
@settings(max_examples=50)
def test_margin_monotone_property(seed):
    r = np.random.default_rng(seed)
    d = 4
    w = r.normal(size=(3, d))
    y = r.integers(0, 3, 5)
    e = r.normal(size=(5, d))
    wn = w / np.linalg.norm(w, axis=1, keepdims=True)
    en = e / np.linalg.norm(e, axis=1, keepdims=True)
    theta = np.arccos(np.clip(np.sum(en * wn[y], axis=1), -1, 1))
    assume(np.all(theta < math.pi - 0.6))
    losses = [arcface_loss(e, w, y, ArcFaceParams(30, m)).loss for m in np.arange(7) / 10]
    assert all(b >= a for a, b in zip(losses, losses[1:]))
