"""Minimal deterministic feed-forward network engine.

Dense, convolution (im2col based) and max-pool layers with ReLU,
exact reverse-mode gradients, and the cross-entropy / ramp losses.
Everything is float64 numpy; adequate at MNIST scale.
"""

import numpy as np

ACTIVATIONS = ("relu", "identity")


def _activate(z, kind):
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "identity":
        return z
    raise ValueError(f"unknown activation: {kind!r}")


def _activation_grad(z, kind, da):
    if kind == "relu":
        return da * (z > 0.0)
    return da


def im2col(x, kh, kw, stride, padding):
    """Unfold (n, c, h, w) into patch rows of shape (n*oh*ow, c*kh*kw).

    Patch entries are laid out channel-major then row-major within the
    kernel window, matching a kernel flattened to (out_ch, c*kh*kw).
    """
    n, c, h, w = x.shape
    sh, sw = stride
    ph, pw = padding
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (w + 2 * pw - kw) // sw + 1
    if oh < 1 or ow < 1:
        raise ValueError(
            f"kernel {kh}x{kw} does not fit input {h}x{w} with padding {padding}"
        )
    img = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    col = np.empty((n, c, kh, kw, oh, ow), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            col[:, :, i, j] = img[:, :, i : i + sh * oh : sh, j : j + sw * ow : sw]
    return col.transpose(0, 4, 5, 1, 2, 3).reshape(n * oh * ow, c * kh * kw)


def col2im(col, x_shape, kh, kw, stride, padding):
    """Adjoint of :func:`im2col`: scatter-add patch rows back onto the image."""
    n, c, h, w = x_shape
    sh, sw = stride
    ph, pw = padding
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (w + 2 * pw - kw) // sw + 1
    col = col.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    img = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            img[:, :, i : i + sh * oh : sh, j : j + sw * ow : sw] += col[:, :, i, j]
    return img[:, :, ph : ph + h, pw : pw + w]


def conv_apply(x, kernel, stride, padding):
    """Bias-free convolution of a batch (n, ic, ih, iw) with the raw kernel."""
    oc, ic, kh, kw = kernel.shape
    n = x.shape[0]
    col = im2col(x, kh, kw, stride, padding)
    out = col @ kernel.reshape(oc, -1).T
    oh = (x.shape[2] + 2 * padding[0] - kh) // stride[0] + 1
    ow = (x.shape[3] + 2 * padding[1] - kw) // stride[1] + 1
    return out.reshape(n, oh, ow, oc).transpose(0, 3, 1, 2)


def conv_apply_adjoint(y, kernel, stride, padding, in_shape):
    """Adjoint of :func:`conv_apply` for an input batch of shape ``in_shape``."""
    oc = kernel.shape[0]
    y2 = y.transpose(0, 2, 3, 1).reshape(-1, oc)
    col = y2 @ kernel.reshape(oc, -1)
    return col2im(col, in_shape, kernel.shape[2], kernel.shape[3], stride, padding)


class DenseLayer:
    """Fully connected layer a = act(x W^T + b), weight shape (out, in)."""

    def __init__(self, weight, bias, activation="relu"):
        weight = np.ascontiguousarray(weight, dtype=np.float64)
        bias = np.ascontiguousarray(bias, dtype=np.float64)
        if weight.ndim != 2 or bias.shape != (weight.shape[0],):
            raise ValueError("dense layer needs weight (out, in) and bias (out,)")
        if not (np.all(np.isfinite(weight)) and np.all(np.isfinite(bias))):
            raise ValueError("dense layer parameters must be finite")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation: {activation!r}")
        self.weight = weight
        self.bias = bias
        self.activation = activation

    @classmethod
    def from_init(cls, in_features, out_features, rng, activation="relu"):
        bound = 1.0 / np.sqrt(in_features)
        weight = rng.uniform(-bound, bound, size=(out_features, in_features))
        return cls(weight, np.zeros(out_features), activation)

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def set_params(self, values):
        self.weight = np.ascontiguousarray(values["weight"], dtype=np.float64)
        self.bias = np.ascontiguousarray(values["bias"], dtype=np.float64)

    def out_shape(self, in_shape):
        flat = int(np.prod(in_shape))
        if flat != self.weight.shape[1]:
            raise ValueError(
                f"dense layer expects {self.weight.shape[1]} inputs, got shape {in_shape}"
            )
        return (self.weight.shape[0],)

    def forward(self, x):
        x2 = x.reshape(x.shape[0], -1)
        if x2.shape[1] != self.weight.shape[1]:
            raise ValueError(
                f"dense layer expects {self.weight.shape[1]} inputs, got {x2.shape[1]}"
            )
        z = x2 @ self.weight.T + self.bias
        return _activate(z, self.activation), (x.shape, x2, z)

    def backward(self, cache, da, need_dx=True):
        x_shape, x2, z = cache
        dz = _activation_grad(z, self.activation, da)
        grads = {"weight": dz.T @ x2, "bias": dz.sum(axis=0)}
        dx = (dz @ self.weight).reshape(x_shape) if need_dx else None
        return dx, grads


class ConvLayer:
    """2D convolution with kernel (out_ch, in_ch, kh, kw), via im2col."""

    def __init__(self, weight, bias, stride=(1, 1), padding=(0, 0), activation="relu"):
        weight = np.ascontiguousarray(weight, dtype=np.float64)
        bias = np.ascontiguousarray(bias, dtype=np.float64)
        if weight.ndim != 4 or bias.shape != (weight.shape[0],):
            raise ValueError("conv layer needs kernel (oc, ic, kh, kw) and bias (oc,)")
        if not (np.all(np.isfinite(weight)) and np.all(np.isfinite(bias))):
            raise ValueError("conv layer parameters must be finite")
        if stride[0] < 1 or stride[1] < 1 or padding[0] < 0 or padding[1] < 0:
            raise ValueError("stride must be positive, padding non-negative")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation: {activation!r}")
        self.weight = weight
        self.bias = bias
        self.stride = (int(stride[0]), int(stride[1]))
        self.padding = (int(padding[0]), int(padding[1]))
        self.activation = activation

    @classmethod
    def from_init(cls, in_ch, out_ch, kh, kw, rng, stride=(1, 1), padding=(0, 0),
                  activation="relu"):
        fan_in = in_ch * kh * kw
        bound = 1.0 / np.sqrt(fan_in)
        weight = rng.uniform(-bound, bound, size=(out_ch, in_ch, kh, kw))
        return cls(weight, np.zeros(out_ch), stride, padding, activation)

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def set_params(self, values):
        self.weight = np.ascontiguousarray(values["weight"], dtype=np.float64)
        self.bias = np.ascontiguousarray(values["bias"], dtype=np.float64)

    def out_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.weight.shape[1]:
            raise ValueError(
                f"conv layer expects ({self.weight.shape[1]}, h, w) inputs, got {in_shape}"
            )
        _, _, kh, kw = self.weight.shape
        oh = (in_shape[1] + 2 * self.padding[0] - kh) // self.stride[0] + 1
        ow = (in_shape[2] + 2 * self.padding[1] - kw) // self.stride[1] + 1
        if oh < 1 or ow < 1:
            raise ValueError(f"conv output extent would be {oh}x{ow}")
        return (self.weight.shape[0], oh, ow)

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.weight.shape[1]:
            raise ValueError(
                f"conv layer expects (n, {self.weight.shape[1]}, h, w) inputs, "
                f"got {x.shape}"
            )
        oc, _, kh, kw = self.weight.shape
        col = im2col(x, kh, kw, self.stride, self.padding)
        n = x.shape[0]
        _, oh, ow = self.out_shape(x.shape[1:])
        # stay in the contiguous (positions, channels) layout; convert to
        # (n, oc, oh, ow) once at the end
        z2 = col @ self.weight.reshape(oc, -1).T
        z2 += self.bias
        a2 = _activate(z2, self.activation)
        a = np.ascontiguousarray(a2.reshape(n, oh, ow, oc).transpose(0, 3, 1, 2))
        return a, (x.shape, col, z2)

    def backward(self, cache, da, need_dx=True):
        x_shape, col, z2 = cache
        oc, _, kh, kw = self.weight.shape
        da2 = da.transpose(0, 2, 3, 1).reshape(-1, oc)
        dz2 = _activation_grad(z2, self.activation, da2)
        grads = {
            "weight": (dz2.T @ col).reshape(self.weight.shape),
            "bias": dz2.sum(axis=0),
        }
        if not need_dx:
            return None, grads
        dcol = dz2 @ self.weight.reshape(oc, -1)
        dx = col2im(dcol, x_shape, kh, kw, self.stride, self.padding)
        return dx, grads


class MaxPoolLayer:
    """Max pooling; stride defaults to the window, trailing remainder dropped.

    Ties within a window resolve to the first entry in row-major order.
    """

    def __init__(self, window, stride=None):
        self.window = (int(window[0]), int(window[1]))
        if self.window[0] < 1 or self.window[1] < 1:
            raise ValueError("pool window must be positive")
        self.stride = self.window if stride is None else (int(stride[0]), int(stride[1]))

    def params(self):
        return None

    def out_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ValueError(f"max-pool expects (c, h, w) inputs, got {in_shape}")
        oh = (in_shape[1] - self.window[0]) // self.stride[0] + 1
        ow = (in_shape[2] - self.window[1]) // self.stride[1] + 1
        if oh < 1 or ow < 1:
            raise ValueError(f"pool window {self.window} exceeds input {in_shape}")
        return (in_shape[0], oh, ow)

    def forward(self, x):
        n, c = x.shape[0], x.shape[1]
        wh, ww = self.window
        sh, sw = self.stride
        _, oh, ow = self.out_shape(x.shape[1:])
        view = np.lib.stride_tricks.sliding_window_view(x, (wh, ww), axis=(2, 3))
        view = view[:, :, ::sh, ::sw][:, :, :oh, :ow]
        win = view.reshape(n, c, oh, ow, wh * ww)
        idx = win.argmax(axis=-1)
        out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
        return np.ascontiguousarray(out), (x.shape, idx)

    def backward(self, cache, da, need_dx=True):
        x_shape, idx = cache
        n, c, h, w = x_shape
        wh, ww = self.window
        sh, sw = self.stride
        oh, ow = idx.shape[2], idx.shape[3]
        rows = (np.arange(oh) * sh)[None, None, :, None] + idx // ww
        cols = (np.arange(ow) * sw)[None, None, None, :] + idx % ww
        dx = np.zeros(x_shape, dtype=np.float64)
        ni = np.arange(n)[:, None, None, None]
        ci = np.arange(c)[None, :, None, None]
        np.add.at(dx, (ni, ci, rows, cols), da)
        return dx, None


class Network:
    """Ordered layer stack with a frozen reference snapshot of its parameters.

    The reference is captured once (before fine-tuning) and is the anchor
    all distance constraints, penalties and bound measures are relative to.
    """

    def __init__(self, layers, input_shape, seed=0):
        self.layers = list(layers)
        self.input_shape = tuple(int(s) for s in input_shape)
        self.seed = int(seed)
        self.reference = None
        # fail early on incompatible layer chains
        self.layer_input_shapes()

    def layer_input_shapes(self):
        """Input shape (sans batch) seen by each layer in order."""
        shapes = []
        shape = self.input_shape
        for layer in self.layers:
            shapes.append(shape)
            shape = layer.out_shape(shape)
        return shapes

    def output_shape(self):
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.out_shape(shape)
        return shape

    def params(self):
        """Live parameter dicts, aligned with layers (None when unparameterized)."""
        return [layer.params() for layer in self.layers]

    def param_layer_indices(self):
        return [i for i, layer in enumerate(self.layers) if layer.params() is not None]

    def capture_reference(self):
        """Snapshot current parameters as the immutable reference."""
        self.reference = [
            None if p is None else {k: v.copy() for k, v in p.items()}
            for p in self.params()
        ]
        return self.reference

    def forward(self, batch):
        batch = np.asarray(batch, dtype=np.float64)
        if batch.shape[1:] != self.input_shape:
            raise ValueError(
                f"batch shape {batch.shape[1:]} does not match network input "
                f"{self.input_shape}"
            )
        caches = []
        out = batch
        for layer in self.layers:
            out, cache = layer.forward(out)
            caches.append((layer, cache))
        return out, caches

    def backward(self, caches, dloss_dlogits):
        if len(caches) != len(self.layers):
            raise ValueError("cache does not match network layer count")
        grads = [None] * len(self.layers)
        d = dloss_dlogits
        for i in range(len(self.layers) - 1, -1, -1):
            layer, cache = caches[i]
            if layer is not self.layers[i]:
                raise ValueError(f"stale cache at layer {i}")
            d, g = layer.backward(cache, d, need_dx=(i > 0))
            grads[i] = g
        return grads


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy and its gradient w.r.t. the logits.

    Uses the log-sum-exp shift, so arbitrarily large logits stay finite.
    The returned gradient is already divided by the batch size; its rows
    sum to zero.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    n, classes = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.min() < 0 or labels.max() >= classes:
        raise ValueError(f"labels must lie in [0, {classes})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    loss = float((lse - shifted[np.arange(n), labels]).mean())
    probs = np.exp(shifted - lse[:, None])
    dlogits = probs
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    return loss, dlogits


def ramp_loss(logits, labels, margin):
    """Mean margin loss clamped to [0, 1]; upper-bounds the 0/1 error."""
    if margin <= 0:
        raise ValueError("margin must be positive")
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    n, classes = logits.shape
    if classes < 2:
        raise ValueError("ramp loss needs at least two classes")
    if labels.min() < 0 or labels.max() >= classes:
        raise ValueError(f"labels must lie in [0, {classes})")
    true_logit = logits[np.arange(n), labels]
    masked = logits.copy()
    masked[np.arange(n), labels] = -np.inf
    runner_up = masked.max(axis=1)
    margins = true_logit - runner_up
    return float(np.clip(1.0 - margins / margin, 0.0, 1.0).mean())


def accuracy(logits, labels):
    """Fraction of rows whose argmax equals the label."""
    preds = np.asarray(logits).argmax(axis=1)
    return float((preds == np.asarray(labels)).mean())
