"""Minimal reverse-mode autodiff over small conv/MLP models, float64 only.

The design is shaped by what DP-SGD needs rather than generality: a model is a
chain of layers over a single flat float64 parameter vector, and the central
operation is the per-example gradient matrix restricted to a set of selected
flat indices. Backprop runs once per example (the batch loop is the outermost
loop), which keeps the per-sample semantics exact; the batched forward pass
caches im2col patches so the per-example backward passes reuse them.

Weight storage: Model.theta is one contiguous float64 vector and every conv/fc
weight tensor is a reshaped view into it, so flat fancy-indexed updates
(theta[ids] += delta) are the only write path and untouched coordinates are
bitwise untouched. Biases are optional, excluded from the flat index space,
and never updated by training (the shipped configs use bias-free models; a
bias stays at whatever value initialization gave it, zero by default).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DataFormatError, NumericalError
from .masks import IndexMask

_INIT_STREAM = 0x1A17  # rng purpose tag so init draws never alias other streams


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

def _im2col(x, kh, kw):
    """(B,C,H,W) -> contiguous (B, OH*OW, C*kh*kw) patch matrix, valid/stride 1."""
    B, C, H, W = x.shape
    OH, OW = H - kh + 1, W - kw + 1
    s0, s1, s2, s3 = x.strides
    win = np.lib.stride_tricks.as_strided(
        x, (B, C, OH, OW, kh, kw), (s0, s1, s2, s3, s2, s3), writeable=False)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B, OH * OW, C * kh * kw)
    return np.ascontiguousarray(cols), (OH, OW)


class Conv2d:
    """Valid (no padding), stride-1 2d convolution; weight (out_ch,in_ch,kh,kw)."""

    kind = "conv2d"
    has_weights = True

    def __init__(self, out_ch, in_ch, kh, kw, bias=False):
        if min(out_ch, in_ch, kh, kw) < 1:
            raise ConfigurationError("conv2d dims must be >= 1")
        self.out_ch, self.in_ch, self.kh, self.kw = out_ch, in_ch, kh, kw
        self.w = None                       # bound to a theta view later
        self.b = np.zeros(out_ch) if bias else None

    @property
    def weight_shape(self):
        return (self.out_ch, self.in_ch, self.kh, self.kw)

    def out_shape(self, in_shape):
        C, H, W = in_shape
        if C != self.in_ch:
            raise ConfigurationError(
                f"conv2d expects {self.in_ch} input channels, got {C}")
        if H < self.kh or W < self.kw:
            raise ConfigurationError(
                f"conv2d kernel {self.kh}x{self.kw} larger than input {H}x{W}")
        return (self.out_ch, H - self.kh + 1, W - self.kw + 1)

    def forward(self, x):
        cols, (OH, OW) = _im2col(x, self.kh, self.kw)
        wmat = self.w.reshape(self.out_ch, -1)
        y = cols @ wmat.T                   # (B, P, out_ch)
        if self.b is not None:
            y += self.b
        y = y.transpose(0, 2, 1).reshape(x.shape[0], self.out_ch, OH, OW)
        return y, (cols, x.shape, OH, OW)

    def backward_sample(self, cache, b, gy, need_gx):
        cols, x_shape, OH, OW = cache
        gy_mat = gy.reshape(self.out_ch, OH * OW)       # (out, P)
        gw = gy_mat @ cols[b]                           # (out, C*kh*kw)
        gx = None
        if need_gx:
            _, C, H, W = x_shape
            gcols = gy_mat.T @ self.w.reshape(self.out_ch, -1)  # (P, C*kh*kw)
            g6 = gcols.reshape(OH, OW, C, self.kh, self.kw)
            gx = np.zeros((C, H, W))
            for i in range(self.kh):                    # fold patches back
                for j in range(self.kw):
                    gx[:, i:i + OH, j:j + OW] += g6[:, :, :, i, j].transpose(2, 0, 1)
        return gx, gw.reshape(-1)


class FullyConnected:
    """Dense layer; weight (out, in)."""

    kind = "fully_connected"
    has_weights = True

    def __init__(self, out_features, in_features, bias=False):
        if min(out_features, in_features) < 1:
            raise ConfigurationError("fully_connected dims must be >= 1")
        self.out_features, self.in_features = out_features, in_features
        self.w = None
        self.b = np.zeros(out_features) if bias else None

    @property
    def weight_shape(self):
        return (self.out_features, self.in_features)

    def out_shape(self, in_shape):
        if len(in_shape) != 1 or in_shape[0] != self.in_features:
            raise ConfigurationError(
                f"fully_connected expects ({self.in_features},) input, got {in_shape}")
        return (self.out_features,)

    def forward(self, x):
        y = x @ self.w.T
        if self.b is not None:
            y += self.b
        return y, (x,)

    def backward_sample(self, cache, b, gy, need_gx):
        (x,) = cache
        gw = np.outer(gy, x[b])
        gx = gy @ self.w if need_gx else None
        return gx, gw.reshape(-1)


class ReLU:
    kind = "relu"
    has_weights = False

    def out_shape(self, in_shape):
        return in_shape

    def forward(self, x):
        return np.maximum(x, 0.0), (x > 0.0,)

    def backward_sample(self, cache, b, gy, need_gx):
        (pos,) = cache
        return gy * pos[b], None


class Flatten:
    kind = "flatten"
    has_weights = False

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x):
        return x.reshape(x.shape[0], -1), (x.shape[1:],)

    def backward_sample(self, cache, b, gy, need_gx):
        (shape,) = cache
        return gy.reshape(shape), None


class MeanPool:
    """Non-overlapping window average; input H, W must divide by the window."""

    kind = "mean_pool"
    has_weights = False

    def __init__(self, window):
        if window < 1:
            raise ConfigurationError("mean_pool window must be >= 1")
        self.window = window

    def out_shape(self, in_shape):
        C, H, W = in_shape
        k = self.window
        if H % k or W % k:
            raise ConfigurationError(
                f"mean_pool window {k} does not divide input {H}x{W}")
        return (C, H // k, W // k)

    def forward(self, x):
        B, C, H, W = x.shape
        k = self.window
        y = x.reshape(B, C, H // k, k, W // k, k).mean(axis=(3, 5))
        return y, ()

    def backward_sample(self, cache, b, gy, need_gx):
        k = self.window
        gx = np.repeat(np.repeat(gy, k, axis=-2), k, axis=-1)
        gx *= 1.0 / (k * k)
        return gx, None


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

class Model:
    """A chain of layers over one flat float64 weight vector.

    flat ids run over conv/fc weight tensors only, concatenated in layer
    order, C-contiguous within a tensor. weight_bounds lists the (start, stop)
    flat range of each prunable layer; layer k of weight_bounds corresponds to
    prunable_layers[k] in self.layers.
    """

    def __init__(self, input_shape, layers):
        self.input_shape = tuple(int(d) for d in input_shape)
        self.layers = list(layers)
        shape = self.input_shape
        counts = []
        self.prunable_layers = []
        for i, layer in enumerate(self.layers):
            try:
                shape = layer.out_shape(shape)
            except ConfigurationError as e:
                raise ConfigurationError(f"layer{i} ({layer.kind}): {e}") from None
            if layer.has_weights:
                self.prunable_layers.append(i)
                counts.append(int(np.prod(layer.weight_shape)))
        if len(shape) != 1:
            raise ConfigurationError(
                f"model output must be a logit vector, got shape {shape}; "
                "add a flatten layer")
        self.num_classes = shape[0]
        stops = np.cumsum([0] + counts)
        self.weight_bounds = tuple(
            (int(stops[k]), int(stops[k + 1])) for k in range(len(counts)))
        self.n_weights = int(stops[-1])
        self.theta = np.zeros(self.n_weights)
        for k, i in enumerate(self.prunable_layers):
            start, stop = self.weight_bounds[k]
            layer = self.layers[i]
            layer.w = self.theta[start:stop].reshape(layer.weight_shape)

    def layer_name(self, i) -> str:
        return f"layer{i}:{self.layers[i].kind}"

    def copy(self) -> "Model":
        """Deep copy: same architecture, independent parameter storage."""
        twin = build_model(self.input_shape, self.spec_dicts())
        twin.theta[...] = self.theta
        for i in self.prunable_layers:
            if self.layers[i].b is not None:
                twin.layers[i].b[...] = self.layers[i].b
        return twin

    def forward(self, x, caches=None):
        """Run the chain; pass a list as `caches` to keep backprop caches."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1:] != self.input_shape:
            raise ConfigurationError(
                f"batch shape {x.shape[1:]} does not match model input "
                f"{self.input_shape}")
        for i, layer in enumerate(self.layers):
            x, cache = layer.forward(x)
            if caches is not None:
                caches.append(cache)
        return x

    def full_mask(self) -> IndexMask:
        return IndexMask.full(self.weight_bounds)

    def empty_mask(self) -> IndexMask:
        return IndexMask.empty(self.weight_bounds)

    def mask_from(self, indices) -> IndexMask:
        return IndexMask.from_indices(indices, self.weight_bounds)

    def spec_dicts(self):
        """Config-shaped description, enough to rebuild the architecture."""
        out = []
        for layer in self.layers:
            if layer.kind == "conv2d":
                out.append({"kind": "conv2d", "out_ch": layer.out_ch,
                            "in_ch": layer.in_ch,
                            "kernel": [layer.kh, layer.kw],
                            "bias": layer.b is not None})
            elif layer.kind == "fully_connected":
                out.append({"kind": "fully_connected",
                            "out": layer.out_features, "in": layer.in_features,
                            "bias": layer.b is not None})
            elif layer.kind == "mean_pool":
                out.append({"kind": "mean_pool", "window": layer.window})
            else:
                out.append({"kind": layer.kind})
        return out


def build_model(input_shape, layer_specs) -> Model:
    """Build a Model from config-shaped layer dicts, inferring input dims."""
    shape = tuple(int(d) for d in input_shape)
    layers = []
    cur = shape
    for pos, spec in enumerate(layer_specs):
        kind = spec.get("kind")
        if kind == "conv2d":
            if len(cur) != 3:
                raise ConfigurationError(
                    f"layer{pos}: conv2d needs (C,H,W) input, have {cur}")
            kernel = spec.get("kernel", 3)
            kh, kw = (kernel, kernel) if np.isscalar(kernel) else map(int, kernel)
            layer = Conv2d(int(spec["out_ch"]), int(spec.get("in_ch", cur[0])),
                           int(kh), int(kw), bias=bool(spec.get("bias", False)))
        elif kind == "fully_connected":
            if len(cur) != 1:
                raise ConfigurationError(
                    f"layer{pos}: fully_connected needs flat input, have {cur}; "
                    "insert a flatten layer")
            layer = FullyConnected(int(spec["out"]), int(spec.get("in", cur[0])),
                                   bias=bool(spec.get("bias", False)))
        elif kind == "relu":
            layer = ReLU()
        elif kind == "flatten":
            layer = Flatten()
        elif kind == "mean_pool":
            layer = MeanPool(int(spec.get("window", 2)))
        else:
            raise ConfigurationError(f"layer{pos}: unknown layer kind {kind!r}")
        cur = layer.out_shape(cur)
        layers.append(layer)
    return Model(shape, layers)


def init_he_uniform(model: Model, seed: int) -> Model:
    """He-uniform weights (bound sqrt(6/fan_in)), zero biases, in place."""
    rng = np.random.default_rng(np.random.SeedSequence([_INIT_STREAM, int(seed)]))
    for i in model.prunable_layers:
        layer = model.layers[i]
        if layer.kind == "conv2d":
            fan_in = layer.in_ch * layer.kh * layer.kw
        else:
            fan_in = layer.in_features
        bound = np.sqrt(6.0 / fan_in)
        layer.w[...] = rng.uniform(-bound, bound, size=layer.weight_shape)
        if layer.b is not None:
            layer.b[...] = 0.0
    return model


# ---------------------------------------------------------------------------
# loss and per-sample gradients
# ---------------------------------------------------------------------------

@dataclass
class PerSampleGrads:
    """One gradient row per example, columns restricted to index_map."""

    batch_size: int
    grads: np.ndarray          # (B, |index_map|) float64
    index_map: IndexMask
    losses: np.ndarray = None  # per-sample losses from the same forward pass


def loss_cross_entropy(logits, labels):
    """Per-sample softmax cross-entropy. labels are integer class ids."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.shape[0] != labels.shape[0]:
        raise ConfigurationError(
            f"{logits.shape[0]} logit rows vs {labels.shape[0]} labels")
    K = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise DataFormatError(
            f"label out of range: model has {K} classes, "
            f"labels span [{labels.min()}, {labels.max()}]")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    return logz - shifted[np.arange(len(labels)), labels]


def _softmax_grads(logits, labels):
    """d(per-sample loss)/d(logits) rows: softmax minus one-hot."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)
    p[np.arange(len(labels)), labels] -= 1.0
    return p


def per_example_rows(model: Model, caches, dlogits, mask: IndexMask) -> np.ndarray:
    """Backprop each dlogits row separately; returns (B, |mask|) weight grads.

    The spine of per_sample_gradients, reused by pruning scorers that seed the
    backward pass with something other than the cross-entropy gradient.
    """
    B = dlogits.shape[0]
    out = np.empty((B, len(mask)))
    if len(mask) == 0 or B == 0:
        return out
    gflat = np.empty(model.n_weights)
    weight_slice = {i: slice(*model.weight_bounds[k])
                    for k, i in enumerate(model.prunable_layers)}
    for b in range(B):
        g = dlogits[b]
        for i in range(len(model.layers) - 1, -1, -1):
            layer = model.layers[i]
            g, gw = layer.backward_sample(caches[i], b, g, need_gx=i > 0)
            if gw is not None:
                gflat[weight_slice[i]] = gw
        out[b] = gflat[mask.indices]
    return out


def per_sample_gradients(model: Model, batch, labels, mask: IndexMask) -> PerSampleGrads:
    """Gradient of each example's loss w.r.t. the weights in `mask`.

    Row b is d loss(b) / d theta gathered at mask.indices; columns outside the
    mask are never part of the returned matrix. One backward pass per example.
    """
    if mask.layer_bounds != model.weight_bounds:
        raise ConfigurationError("mask does not belong to this model")
    labels = np.asarray(labels, dtype=np.int64)
    caches = []
    logits = model.forward(batch, caches=caches)
    losses = loss_cross_entropy(logits, labels)
    out = per_example_rows(model, caches, _softmax_grads(logits, labels), mask)
    if not np.isfinite(out).all():
        bad = _first_nonfinite_layer(model, out, mask)
        raise NumericalError(f"non-finite gradient in {bad}")
    return PerSampleGrads(logits.shape[0], out, mask, losses)


def _first_nonfinite_layer(model, out, mask):
    """Name the first prunable layer whose gradient columns went non-finite."""
    col_bad = ~np.isfinite(out).all(axis=0)
    bad_ids = mask.indices[col_bad]
    for k, i in enumerate(model.prunable_layers):
        start, stop = model.weight_bounds[k]
        if np.any((bad_ids >= start) & (bad_ids < stop)):
            return model.layer_name(i)
    return "unknown layer"
