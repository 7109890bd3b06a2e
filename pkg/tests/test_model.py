import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualloss.errors import DimensionError, ParameterError
from dualloss.model import (CNN_CHANNELS, EmbeddingModel, ModelDims, classify, cnn_forward, conv3x3_forward,
                            dropout_mask, global_avg_pool, init_params, is_bias, maxpool2_forward,
                            mlp_forward)
from dualloss.tensor import RngStream


def toy_params(f=8, hidden=16, d=8, c=3, extractor="identity", seed=0):
    dims = ModelDims(in_features=f, hidden=hidden, embed=d, classes=c, extractor=extractor)
    return dims, init_params(dims, RngStream(seed))


def test_default_dims():
    dims = ModelDims()
    assert (dims.hidden, dims.embed, dims.classes, dims.dropout) == (512, 256, 6, 0.5)
    assert CNN_CHANNELS == (3, 8, 16, 32)


def test_identity_extractor_passthrough(rng):
    dims, p = toy_params()
    x = rng.normal(size=(3, 8))
    feats, _ = EmbeddingModel(dims, p).extract(x)
    assert np.array_equal(feats, x)


def test_small_cnn_zero_image_gives_zero_features():
    dims, p = toy_params(f=32, extractor="small-cnn")
    feats, _ = cnn_forward(p, np.zeros((2, 3, 32, 32)))
    assert feats.shape == (2, 32) and not feats.any()


def test_conv_matches_direct_loops(rng):
    x = rng.normal(size=(1, 2, 4, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    out, _ = conv3x3_forward(x, w, b)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((1, 3, 4, 5))
    for o in range(3):
        for i in range(4):
            for j in range(5):
                ref[0, o, i, j] = np.sum(xp[0, :, i:i + 3, j:j + 3] * w[o]) + b[o]
    assert np.allclose(out, ref, rtol=0, atol=1e-12)


def test_maxpool_picks_window_max():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    out, _ = maxpool2_forward(x)
    assert np.array_equal(out[0, 0], [[5, 7], [13, 15]])


def test_global_avg_pool_examples(rng):
    assert np.array_equal(global_avg_pool(np.full((3, 2, 5), 1.5)), [1.5, 1.5, 1.5])
    assert global_avg_pool(np.array([[[1.0, 2.0], [3.0, 4.0]]])).tolist() == [2.5]
    x = rng.normal(size=(2, 3, 3))
    perm = rng.permutation(9)
    shuffled = x.reshape(2, 9)[:, perm].reshape(2, 3, 3)
    assert np.allclose(global_avg_pool(shuffled), global_avg_pool(x), rtol=0, atol=1e-15)
    with pytest.raises(DimensionError):
        global_avg_pool(np.zeros((2, 0, 3)))


def test_mlp_zero_weights():
    _, p = toy_params()
    zero = {k: np.zeros_like(v) for k, v in p.items()}
    e, _ = mlp_forward(zero, np.ones((2, 8)), train=False)
    assert not e.any()


def test_eval_mode_ignores_rng(rng):
    _, p = toy_params()
    x = rng.normal(size=(4, 8))
    a, _ = mlp_forward(p, x, train=False, p=0.5, rng=RngStream(1))
    b, _ = mlp_forward(p, x, train=False, p=0.5, rng=RngStream(2))
    assert np.array_equal(a, b)


def test_inverted_dropout_expectation(rng):
    # linear layer after the mask: mean over masks approaches the p = 0 output
    _, p = toy_params(f=4, hidden=32, d=3)
    x = rng.normal(size=(1, 4))
    ref, _ = mlp_forward(p, x, train=False, final_relu=False)
    base = RngStream(77)
    outs = [mlp_forward(p, x, train=True, p=0.5, rng=base.derive(i), final_relu=False)[0]
            for i in range(10_000)]
    mean = np.mean(outs, axis=0)
    assert np.linalg.norm(mean - ref) / np.linalg.norm(ref) < 0.02


def test_dropout_mask_distribution():
    m = dropout_mask((200, 500), 0.5, RngStream(3))
    assert set(np.unique(m)) == {0.0, 2.0}
    keep = (m > 0).mean()
    assert abs(keep - 0.5) < 0.005
    # chi-square over columns: keeps are independent Bernoulli(0.5)
    k = (m > 0).sum(axis=0)
    chi2 = np.sum((k - 100) ** 2 / 100 + (200 - k - 100) ** 2 / 100)
    assert chi2 < 500 + 4 * math.sqrt(2 * 500)
    with pytest.raises(ParameterError):
        dropout_mask((2, 2), 1.0, RngStream(0))


def test_final_relu_flag(rng):
    _, p = toy_params()
    x = rng.normal(size=(5, 8))
    e_relu, _ = mlp_forward(p, x, train=False)
    e_lin, _ = mlp_forward(p, x, train=False, final_relu=False)
    assert np.all(e_relu >= 0)
    assert np.array_equal(e_relu, np.maximum(e_lin, 0))


def test_mlp_shape_errors(rng):
    _, p = toy_params()
    with pytest.raises(DimensionError):
        mlp_forward(p, rng.normal(size=(2, 7)), train=False)
    with pytest.raises(ParameterError):
        mlp_forward(p, rng.normal(size=(2, 8)), train=True, p=1.0, rng=RngStream(0))


def test_classify_examples(rng):
    b = np.array([1.0, -2.0, 3.0])
    assert np.array_equal(classify(rng.normal(size=4), np.zeros((3, 4)), b), b)
    e = rng.normal(size=(2, 4))
    w = np.eye(4)[[2, 0, 3]]
    assert np.array_equal(classify(e, w, np.zeros(3)), e[:, [2, 0, 3]])
    with pytest.raises(DimensionError):
        classify(e, np.zeros((3, 5)), np.zeros(3))


def test_init_determinism_and_biases():
    dims = ModelDims(extractor="small-cnn")
    a = init_params(dims, RngStream(5))
    b = init_params(dims, RngStream(5))
    assert a.keys() == b.keys()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    for k, v in a.items():
        if is_bias(k):
            assert not v.any(), k


def test_init_std():
    dims = ModelDims(in_features=256, hidden=512)
    w = init_params(dims, RngStream(0))["mlp.W1"]
    assert w.shape == (512, 256)
    assert abs(w.std() / math.sqrt(2 / 256) - 1) < 0.05


def test_eval_determinism(rng):
    dims, p = toy_params()
    model = EmbeddingModel(dims, p)
    x = rng.normal(size=(3, 8))
    assert np.array_equal(model.embed(x), model.embed(x))


@given(st.integers(1, 6), st.integers(1, 9))
@settings(max_examples=20)
def test_embedding_shape_contract(n, f):
    dims, p = toy_params(f=f, d=5)
    e = EmbeddingModel(dims, p).embed(np.ones((n, f)))
    assert e.shape == (n, 5)


def test_model_dims_validation():
    with pytest.raises(ParameterError):
        ModelDims(extractor="resnet")
    with pytest.raises(ParameterError):
        ModelDims(extractor="small-cnn", in_features=16)


def _flat_loss(model, x, g):
    e, cache = model.forward(x, train=False)
    return float(np.sum(e * g)), cache


def test_small_cnn_backward_fd(rng):
    dims = ModelDims(in_features=32, hidden=8, embed=4, classes=2, extractor="small-cnn", dropout=0.0)
    p = init_params(dims, RngStream(9))
    for k in p:
        if is_bias(k):
            p[k] = rng.normal(0, 0.1, p[k].shape)
    x = rng.normal(size=(1, 3, 8, 8))
    g = rng.normal(size=(1, 4))
    model = EmbeddingModel(dims, p)
    _, cache = _flat_loss(model, x, g)
    grads = model.backward(g, cache)
    for name in ("cnn.conv1.W", "cnn.conv3.b", "mlp.W1"):
        for idx in [tuple(rng.integers(0, s) for s in p[name].shape) for _ in range(4)]:
            old = p[name][idx]
            p[name][idx] = old + 1e-6
            fp = _flat_loss(model, x, g)[0]
            p[name][idx] = old - 1e-6
            fm = _flat_loss(model, x, g)[0]
            p[name][idx] = old
            num = (fp - fm) / 2e-6
            assert abs(num - grads[name][idx]) <= 1e-4 * max(abs(num), abs(grads[name][idx]), 1e-6)
