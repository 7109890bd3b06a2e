"""Embedding pipeline: feature extractor -> global average pool -> MLP head -> classifier.

All passes are batched: images are ``(N, 3, H, W)``, features ``(N, F)``.
Parameters live in a flat ``dict[str, ndarray]`` so the optimizer and the
checkpoint writer can treat them uniformly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, ParameterError
from .tensor import RngStream, as_tensor, check_finite

EXTRACTORS = ("small-cnn", "precomputed", "identity")
CNN_CHANNELS = (3, 8, 16, 32)
CNN_INPUT = 32  # pipeline images are downscaled to this side before the small CNN
HIDDEN = 512
EMBED_DIM = 256
NUM_CLASSES = 6

# stream tags for init_params
_INIT = 1


@dataclass(frozen=True)
class ModelDims:
    in_features: int = 32
    hidden: int = HIDDEN
    embed: int = EMBED_DIM
    classes: int = NUM_CLASSES
    extractor: str = "precomputed"
    dropout: float = 0.5
    final_relu: bool = True

    def __post_init__(self):
        if self.extractor not in EXTRACTORS:
            raise ParameterError(f"unknown extractor {self.extractor!r}; choose from {EXTRACTORS}")
        if not 0 <= self.dropout < 1:
            raise ParameterError(f"dropout rate must lie in [0, 1), got {self.dropout}")
        if self.extractor == "small-cnn" and self.in_features != CNN_CHANNELS[-1]:
            raise ParameterError(f"small-cnn produces {CNN_CHANNELS[-1]} features, got in_features={self.in_features}")
        if min(self.in_features, self.hidden, self.embed) < 1 or self.classes < 2:
            raise ParameterError(f"invalid model dimensions {self}")


# --------------------------------------------------------------------------
# small CNN


def conv3x3_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """3x3 convolution, stride 1, zero padding 1. x: (N, C, H, W), w: (O, C, 3, 3)."""
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))  # N, C, H, W, 3, 3
    out = np.einsum("nchwij,ocij->nohw", win, w, optimize=True) + b[None, :, None, None]
    return out, xp


def conv3x3_backward(g: np.ndarray, xp: np.ndarray, w: np.ndarray):
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))
    gw = np.einsum("nchwij,nohw->ocij", win, g, optimize=True)
    gb = g.sum(axis=(0, 2, 3))
    # input gradient: correlate the padded upstream with the flipped kernel
    gp = np.pad(g, ((0, 0), (0, 0), (1, 1), (1, 1)))
    gwin = sliding_window_view(gp, (3, 3), axis=(2, 3))
    gx = np.einsum("nohwij,ocij->nchw", gwin, w[:, :, ::-1, ::-1], optimize=True)
    return gx, gw, gb


def maxpool2_forward(x: np.ndarray):
    """2x2 max pool, stride 2; odd trailing rows/columns are dropped."""
    n, c, h, w = x.shape
    if h < 2 or w < 2:
        raise DimensionError(f"max-pool needs spatial extent >= 2, got {h}x{w}")
    ho, wo = h // 2, w // 2
    blocks = x[:, :, : 2 * ho, : 2 * wo].reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5)
    flat = blocks.reshape(n, c, ho, wo, 4)
    arg = np.argmax(flat, axis=-1)  # first max wins ties
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return out, (x.shape, arg)


def maxpool2_backward(g: np.ndarray, cache):
    shape, arg = cache
    n, c, h, w = shape
    ho, wo = g.shape[2], g.shape[3]
    flat = np.zeros((n, c, ho, wo, 4))
    np.put_along_axis(flat, arg[..., None], g[..., None], axis=-1)
    blocks = flat.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * ho, 2 * wo)
    gx = np.zeros(shape)
    gx[:, :, : 2 * ho, : 2 * wo] = blocks
    return gx


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    """Channel-wise spatial mean. Accepts (C, H, W) or (N, C, H, W)."""
    x = as_tensor(x)
    if x.ndim not in (3, 4):
        raise DimensionError(f"global_avg_pool expects (C,H,W) or (N,C,H,W), got {x.shape}")
    if x.shape[-1] == 0 or x.shape[-2] == 0:
        raise DimensionError(f"global_avg_pool: empty spatial extent in shape {x.shape}")
    return x.mean(axis=(-2, -1))


def cnn_forward(params: dict, x: np.ndarray):
    if x.ndim != 4 or x.shape[1] != 3:
        raise DimensionError(f"small-cnn expects (N, 3, H, W) images, got {x.shape}")
    caches = []
    h = x
    for i in range(1, len(CNN_CHANNELS)):
        pre, xp = conv3x3_forward(h, params[f"cnn.conv{i}.W"], params[f"cnn.conv{i}.b"])
        act = np.maximum(pre, 0.0)
        h, pool_cache = maxpool2_forward(act)
        caches.append((xp, pre, pool_cache))
    feats = global_avg_pool(h)
    return feats, (caches, h.shape)


def cnn_backward(params: dict, g_feats: np.ndarray, cache) -> dict:
    caches, last_shape = cache
    n, c, hh, ww = last_shape
    g = np.broadcast_to(g_feats[:, :, None, None] / (hh * ww), last_shape).copy()
    grads = {}
    for i in range(len(CNN_CHANNELS) - 1, 0, -1):
        xp, pre, pool_cache = caches[i - 1]
        g = maxpool2_backward(g, pool_cache) * (pre > 0)
        g, grads[f"cnn.conv{i}.W"], grads[f"cnn.conv{i}.b"] = conv3x3_backward(g, xp, params[f"cnn.conv{i}.W"])
    return grads


def cnn_activation_pattern(params: dict, x: np.ndarray) -> bytes:
    """ReLU and max-pool routing of a forward pass; finite differences skip points where it flips."""
    caches, _ = cnn_forward(params, x)[1]
    parts = []
    for _, pre, (_, arg) in caches:
        parts.append(np.packbits(pre > 0).tobytes())
        parts.append(arg.astype(np.int8).tobytes())
    return b"".join(parts)


# --------------------------------------------------------------------------
# MLP head and classifier


def dropout_mask(shape, p: float, rng: RngStream) -> np.ndarray:
    """Inverted-dropout mask: Bernoulli(1 - p) keeps scaled by 1 / (1 - p)."""
    if not 0 <= p < 1:
        raise ParameterError(f"dropout rate must lie in [0, 1), got {p}")
    if p == 0:
        return np.ones(shape)
    return rng.bernoulli(1.0 - p, shape) / (1.0 - p)


def mlp_forward(params: dict, x: np.ndarray, *, train: bool, p: float = 0.5, rng: RngStream | None = None,
                final_relu: bool = True):
    """Two-layer head: ReLU(W1 x + b1) -> dropout -> [ReLU](W2 h + b2)."""
    x = as_tensor(x, 2, "mlp input")
    w1, b1, w2, b2 = params["mlp.W1"], params["mlp.b1"], params["mlp.W2"], params["mlp.b2"]
    if x.shape[1] != w1.shape[1]:
        raise DimensionError(f"mlp expects {w1.shape[1]} input features, got {x.shape[1]}")
    if not 0 <= p < 1:
        raise ParameterError(f"dropout rate must lie in [0, 1), got {p}")
    pre1 = x @ w1.T + b1
    h1 = np.maximum(pre1, 0.0)
    if train and p > 0:
        if rng is None:
            raise ParameterError("train-mode dropout needs an RngStream")
        mask = dropout_mask(h1.shape, p, rng)
    else:
        mask = None
    h1d = h1 * mask if mask is not None else h1
    pre2 = h1d @ w2.T + b2
    e = np.maximum(pre2, 0.0) if final_relu else pre2
    cache = dict(x=x, pre1=pre1, mask=mask, h1d=h1d, pre2=pre2, final_relu=final_relu)
    return check_finite(e, "embeddings"), cache


def mlp_backward(params: dict, g_e: np.ndarray, cache) -> tuple[np.ndarray, dict]:
    g_pre2 = g_e * (cache["pre2"] > 0) if cache["final_relu"] else g_e
    grads = {
        "mlp.W2": g_pre2.T @ cache["h1d"],
        "mlp.b2": g_pre2.sum(axis=0),
    }
    g_h1 = g_pre2 @ params["mlp.W2"]
    if cache["mask"] is not None:
        g_h1 = g_h1 * cache["mask"]
    g_pre1 = g_h1 * (cache["pre1"] > 0)
    grads["mlp.W1"] = g_pre1.T @ cache["x"]
    grads["mlp.b1"] = g_pre1.sum(axis=0)
    g_x = g_pre1 @ params["mlp.W1"]
    return g_x, grads


def classify(e: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Affine logits ``e W^T + b`` (W is C x D). Accepts a single embedding or a batch."""
    e = as_tensor(e)
    if e.shape[-1] != w.shape[1]:
        raise DimensionError(f"classifier expects dim {w.shape[1]}, got {e.shape[-1]}")
    return check_finite(e @ w.T + b, "logits")


# --------------------------------------------------------------------------
# parameters


def _he(rng: RngStream, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), shape)


def init_params(dims: ModelDims, rng: RngStream) -> dict[str, np.ndarray]:
    """He-normal weights (std sqrt(2 / fan_in)), zero biases. Each tensor has its own derived stream."""
    params: dict[str, np.ndarray] = {}
    layer = 0

    def weight(name, shape, fan_in):
        nonlocal layer
        params[name] = _he(rng.derive(_INIT, layer), shape, fan_in)
        layer += 1

    if dims.extractor == "small-cnn":
        for i in range(1, len(CNN_CHANNELS)):
            cin, cout = CNN_CHANNELS[i - 1], CNN_CHANNELS[i]
            weight(f"cnn.conv{i}.W", (cout, cin, 3, 3), cin * 9)
            params[f"cnn.conv{i}.b"] = np.zeros(cout)
    weight("mlp.W1", (dims.hidden, dims.in_features), dims.in_features)
    params["mlp.b1"] = np.zeros(dims.hidden)
    weight("mlp.W2", (dims.embed, dims.hidden), dims.hidden)
    params["mlp.b2"] = np.zeros(dims.embed)
    weight("cls.W", (dims.classes, dims.embed), dims.embed)
    params["cls.b"] = np.zeros(dims.classes)
    weight("arc.W", (dims.classes, dims.embed), dims.embed)
    return params


def is_bias(name: str) -> bool:
    return name.rsplit(".", 1)[-1].startswith("b")


class EmbeddingModel:
    """Extractor + MLP head over a parameter dict."""

    def __init__(self, dims: ModelDims, params: dict[str, np.ndarray]):
        self.dims = dims
        self.params = params

    def extract(self, x: np.ndarray):
        if self.dims.extractor == "small-cnn":
            return cnn_forward(self.params, as_tensor(x))
        x = as_tensor(x, 2, "features")
        if x.shape[1] != self.dims.in_features:
            raise DimensionError(f"expected {self.dims.in_features}-dim features, got {x.shape[1]}")
        return x, None

    def forward(self, x: np.ndarray, *, train: bool, rng: RngStream | None = None):
        feats, ext_cache = self.extract(x)
        e, mlp_cache = mlp_forward(self.params, feats, train=train, p=self.dims.dropout, rng=rng,
                                   final_relu=self.dims.final_relu)
        return e, (ext_cache, mlp_cache)

    def embed(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x, train=False)[0]

    def backward(self, g_e: np.ndarray, cache) -> dict[str, np.ndarray]:
        ext_cache, mlp_cache = cache
        g_feats, grads = mlp_backward(self.params, g_e, mlp_cache)
        if self.dims.extractor == "small-cnn":
            grads.update(cnn_backward(self.params, g_feats, ext_cache))
        return grads
