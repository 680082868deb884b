"""Trainable feature extractors that produce the node embedding.

Networks are plain sequences of layers.  Each layer caches what it needs in
``forward(x, train=True)`` and ``backward(grad)`` returns the gradient with
respect to its input while storing parameter gradients in ``layer.grads``.
All arithmetic is float64.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, ShapeError, UsageError

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._cache = None

    def spec(self) -> str:
        return self.kind

    def output_shape(self, shape):
        return shape

    def forward(self, x, train=False):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def _cached(self):
        if self._cache is None:
            raise UsageError(f"{self.kind}: backward called without a train-mode forward")
        return self._cache


class Dense(Layer):
    kind = "dense"

    def __init__(self, n_in, n_out, rng=None):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        bound = 1.0 / np.sqrt(n_in)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params["W"] = rng.uniform(-bound, bound, size=(n_in, n_out))
        self.params["b"] = rng.uniform(-bound, bound, size=n_out)

    def spec(self):
        return f"dense in={self.n_in} out={self.n_out}"

    def output_shape(self, shape):
        if shape != (self.n_in,):
            raise ShapeError(f"dense layer expects ({self.n_in},) input, got {shape}")
        return (self.n_out,)

    def forward(self, x, train=False):
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ShapeError(f"dense layer expects (B, {self.n_in}) input, got {x.shape}")
        if train:
            self._cache = x
        return x @ self.params["W"] + self.params["b"]

    def backward(self, grad):
        x = self._cached()
        self.grads["W"] = x.T @ grad
        self.grads["b"] = grad.sum(axis=0)
        return grad @ self.params["W"].T


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train=False):
        mask = x > 0
        if train:
            self._cache = mask
        return np.where(mask, x, 0.0)

    def backward(self, grad):
        return np.where(self._cached(), grad, 0.0)


class Conv2d(Layer):
    """5x5 convolution, stride 1, zero padding 2 (output keeps the input size)."""

    kind = "conv5x5"
    size = 5

    def __init__(self, c_in, c_out, rng=None):
        super().__init__()
        self.c_in, self.c_out = c_in, c_out
        fan_in = c_in * self.size * self.size
        bound = 1.0 / np.sqrt(fan_in)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params["W"] = rng.uniform(-bound, bound, size=(c_out, c_in, self.size, self.size))
        self.params["b"] = rng.uniform(-bound, bound, size=c_out)

    def spec(self):
        return f"conv5x5 in={self.c_in} out={self.c_out}"

    def output_shape(self, shape):
        if len(shape) != 3 or shape[0] != self.c_in:
            raise ShapeError(f"conv layer expects ({self.c_in}, H, W) input, got {shape}")
        return (self.c_out,) + tuple(shape[1:])

    def _columns(self, x):
        p = self.size // 2
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        # (B, C, H, W, k, k) -> (B, H, W, C*k*k)
        win = sliding_window_view(xp, (self.size, self.size), axis=(2, 3))
        b, c, h, w = x.shape
        return win.transpose(0, 2, 3, 1, 4, 5).reshape(b, h, w, c * self.size * self.size)

    def forward(self, x, train=False):
        if x.ndim != 4 or x.shape[1] != self.c_in:
            raise ShapeError(f"conv layer expects (B, {self.c_in}, H, W) input, got {x.shape}")
        cols = self._columns(x)
        w = self.params["W"].reshape(self.c_out, -1)
        out = cols @ w.T + self.params["b"]
        if train:
            self._cache = (x.shape, cols)
        return out.transpose(0, 3, 1, 2)

    def backward(self, grad):
        shape, cols = self._cached()
        g = grad.transpose(0, 2, 3, 1)  # (B, H, W, Cout)
        self.grads["W"] = np.tensordot(g, cols, axes=([0, 1, 2], [0, 1, 2])).reshape(self.params["W"].shape)
        self.grads["b"] = g.sum(axis=(0, 1, 2))
        # Input gradient is a full correlation with the flipped kernel.
        b, c, h, wd = shape
        p = self.size // 2
        gp = np.pad(grad, ((0, 0), (0, 0), (p, p), (p, p)))
        win = sliding_window_view(gp, (self.size, self.size), axis=(2, 3))
        gcols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b, h, wd, -1)
        flipped = self.params["W"][:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(self.c_in, -1)
        return (gcols @ flipped.T).transpose(0, 3, 1, 2)


class BatchNorm2d(Layer):
    kind = "batchnorm"

    def __init__(self, channels):
        super().__init__()
        self.channels = channels
        self.params["gamma"] = np.ones(channels)
        self.params["beta"] = np.zeros(channels)
        self.buffers["running_mean"] = np.zeros(channels)
        self.buffers["running_var"] = np.ones(channels)

    def spec(self):
        return f"batchnorm channels={self.channels}"

    def output_shape(self, shape):
        if len(shape) != 3 or shape[0] != self.channels:
            raise ShapeError(f"batch norm expects ({self.channels}, H, W) input, got {shape}")
        return shape

    def forward(self, x, train=False):
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeError(f"batch norm expects (B, {self.channels}, H, W) input, got {x.shape}")
        if train:
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            n = x.size // self.channels
            unbiased = var * n / max(n - 1, 1)
            rm, rv = self.buffers["running_mean"], self.buffers["running_var"]
            self.buffers["running_mean"] = BN_MOMENTUM * rm + (1 - BN_MOMENTUM) * mean
            self.buffers["running_var"] = BN_MOMENTUM * rv + (1 - BN_MOMENTUM) * unbiased
        else:
            mean, var = self.buffers["running_mean"], self.buffers["running_var"]
        inv = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (x - mean[None, :, None, None]) * inv[None, :, None, None]
        if train:
            self._cache = (xhat, inv)
        return xhat * self.params["gamma"][None, :, None, None] + self.params["beta"][None, :, None, None]

    def backward(self, grad):
        xhat, inv = self._cached()
        axes = (0, 2, 3)
        self.grads["gamma"] = (grad * xhat).sum(axis=axes)
        self.grads["beta"] = grad.sum(axis=axes)
        n = grad.size // self.channels
        gx = grad * self.params["gamma"][None, :, None, None]
        mean_g = gx.sum(axis=axes, keepdims=True) / n
        mean_gx = (gx * xhat).sum(axis=axes, keepdims=True) / n
        return (gx - mean_g - xhat * mean_gx) * inv[None, :, None, None]


class AvgPool2d(Layer):
    """Non-overlapping 2x2 average pooling; an odd trailing row/column is dropped."""

    kind = "avgpool2x2"

    def output_shape(self, shape):
        c, h, w = shape
        if h < 2 or w < 2:
            raise ShapeError(f"input {shape} too small for 2x2 pooling")
        return (c, h // 2, w // 2)

    def forward(self, x, train=False):
        b, c, h, w = x.shape
        h2, w2 = h // 2, w // 2
        xs = x[:, :, : 2 * h2, : 2 * w2].reshape(b, c, h2, 2, w2, 2)
        if train:
            self._cache = x.shape
        return xs.mean(axis=(3, 5))

    def backward(self, grad):
        shape = self._cached()
        b, c, h2, w2 = grad.shape
        out = np.zeros(shape)
        up = np.repeat(np.repeat(grad, 2, axis=2), 2, axis=3) / 4.0
        out[:, :, : 2 * h2, : 2 * w2] = up
        return out


class GlobalAvgPool(Layer):
    kind = "globalavgpool"

    def output_shape(self, shape):
        return (shape[0],)

    def forward(self, x, train=False):
        if train:
            self._cache = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, grad):
        b, c, h, w = self._cached()
        return np.broadcast_to(grad[:, :, None, None] / (h * w), (b, c, h, w)).copy()


class Network:
    """Sequential extractor mapping a batch of inputs to an embedding."""

    def __init__(self, layers, input_shape):
        self.layers = list(layers)
        self.input_shape = tuple(int(s) for s in input_shape)
        shape = self.input_shape if len(self.input_shape) != 2 else (1,) + self.input_shape
        for layer in self.layers:
            shape = layer.output_shape(shape)
        if len(shape) != 1:
            raise ConfigError(f"network must end in a flat embedding, got shape {shape}")
        self.width = shape[0]
        self._ready = False

    def specs(self) -> list[str]:
        return [layer.spec() for layer in self.layers]

    def _prepare(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1:] != self.input_shape:
            raise ShapeError(f"extractor expects inputs of shape {self.input_shape}, got {x.shape[1:]}")
        if len(self.input_shape) == 2:
            x = x[:, None, :, :]
        return x

    def forward(self, x, train=False):
        """Embedding of shape ``(B, width)``.

        Train mode uses batch statistics in batch-norm layers and updates
        their running estimates; eval mode uses the frozen estimates.
        """
        out = self._prepare(x)
        for layer in self.layers:
            out = layer.forward(out, train)
        self._ready = train
        return out

    def calibrate(self, x, chunk=256):
        """Eval-mode embedding of ``x`` after resetting every batch-norm layer's
        running statistics to the exact mean and variance over ``x``.

        Works layer by layer, so one layer's activations for the whole of
        ``x`` are held in memory at a time.
        """
        acts = [self._prepare(x[i : i + chunk]) for i in range(0, len(x), chunk)]
        for layer in self.layers:
            if isinstance(layer, BatchNorm2d) and acts:
                n = sum(a.shape[0] * a.shape[2] * a.shape[3] for a in acts)
                mean = sum(a.sum(axis=(0, 2, 3)) for a in acts) / n
                sq = sum(((a - mean[None, :, None, None]) ** 2).sum(axis=(0, 2, 3)) for a in acts)
                layer.buffers["running_mean"] = mean
                layer.buffers["running_var"] = sq / max(n - 1, 1)
            acts = [layer.forward(a, False) for a in acts]
        if not acts:
            return np.zeros((0, self.width))
        return np.concatenate(acts)

    def backward(self, grad):
        """Backpropagate ``dL/d embedding``; returns the parameter gradients."""
        if not self._ready:
            raise UsageError("backward requires a preceding train-mode forward pass")
        g = np.asarray(grad, dtype=np.float64)
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return self.gradients()

    def named_params(self):
        return {f"{i}.{k}": v for i, layer in enumerate(self.layers) for k, v in layer.params.items()}

    def named_buffers(self):
        return {f"{i}.{k}": v for i, layer in enumerate(self.layers) for k, v in layer.buffers.items()}

    def gradients(self):
        return {f"{i}.{k}": v for i, layer in enumerate(self.layers) for k, v in layer.grads.items()}

    def set_param(self, name, value):
        i, key = name.split(".", 1)
        layer = self.layers[int(i)]
        target = layer.params if key in layer.params else layer.buffers
        if key not in target:
            raise KeyError(name)
        value = np.asarray(value, dtype=np.float64)
        if value.shape != target[key].shape:
            raise ShapeError(f"{name}: expected shape {target[key].shape}, got {value.shape}")
        target[key] = value


PRESETS = ("mlp", "cnn4", "cnn4-desk")
CNN4_CHANNELS = (64, 128, 256, 512)
CNN4_DESK_CHANNELS = (8, 16, 32, 64)


def mlp(input_dim, width, hidden=(64,), rng=None):
    rng = rng if rng is not None else np.random.default_rng(0)
    layers, n = [], input_dim
    for h in hidden:
        layers += [Dense(n, h, rng), ReLU()]
        n = h
    layers.append(Dense(n, width, rng))
    return Network(layers, (input_dim,))


def cnn4(input_shape, width, channels=CNN4_CHANNELS, rng=None):
    """Four conv5x5 + batch-norm + ReLU blocks with 2x2 average pooling between
    neighbouring blocks, then global average pooling and a dense projection."""
    rng = rng if rng is not None else np.random.default_rng(0)
    layers, c = [], 1
    for i, ch in enumerate(channels):
        if i:
            layers.append(AvgPool2d())
        layers += [Conv2d(c, ch, rng), BatchNorm2d(ch), ReLU()]
        c = ch
    layers += [GlobalAvgPool(), Dense(c, width, rng)]
    return Network(layers, input_shape)


def build_extractor(preset, input_shape, width, seed=0, hidden=(64,)):
    rng = np.random.default_rng(seed)
    input_shape = tuple(input_shape)
    if preset == "mlp":
        if len(input_shape) == 2:
            raise ConfigError("mlp preset needs flat feature vectors")
        return mlp(input_shape[0], width, hidden, rng)
    if preset in ("cnn4", "cnn4-desk"):
        if len(input_shape) != 2:
            raise ConfigError(f"{preset} preset needs (frames, bands) features, got {input_shape}")
        chans = CNN4_CHANNELS if preset == "cnn4" else CNN4_DESK_CHANNELS
        return cnn4(input_shape, width, chans, rng)
    raise ConfigError(f"unknown extractor preset {preset!r}")


def network_from_specs(specs, input_shape):
    """Rebuild a network skeleton from :meth:`Network.specs` lines."""
    layers = []
    for line in specs:
        kind, *fields = line.split()
        kw = dict(f.split("=", 1) for f in fields)
        if kind == "dense":
            layers.append(Dense(int(kw["in"]), int(kw["out"])))
        elif kind == "conv5x5":
            layers.append(Conv2d(int(kw["in"]), int(kw["out"])))
        elif kind == "batchnorm":
            layers.append(BatchNorm2d(int(kw["channels"])))
        elif kind == "relu":
            layers.append(ReLU())
        elif kind == "avgpool2x2":
            layers.append(AvgPool2d())
        elif kind == "globalavgpool":
            layers.append(GlobalAvgPool())
        else:
            raise ConfigError(f"unknown layer kind {kind!r}")
    return Network(layers, input_shape)


def assign_nodes(width, tree_count, topology, seed=0, policy="exclusive"):
    """Map every decision node of every tree to an embedding column.

    ``exclusive`` gives each column to exactly one node, tree by tree in
    breadth-first order, and needs ``width == tree_count * node_count``.
    ``random`` draws a column uniformly with replacement for every node.
    Returns an int array of shape ``(tree_count, node_count)``.
    """
    if width < 1:
        raise ConfigError("embedding width must be at least 1")
    nodes = topology.node_count
    if policy == "exclusive":
        if width != tree_count * nodes:
            raise ConfigError(
                f"exclusive node assignment needs width {tree_count * nodes} "
                f"({tree_count} trees x {nodes} nodes), got {width}"
            )
        return np.arange(width, dtype=np.int64).reshape(tree_count, nodes)
    if policy == "random":
        rng = np.random.default_rng(seed)
        return rng.integers(0, width, size=(tree_count, nodes), dtype=np.int64)
    raise ConfigError(f"unknown node assignment policy {policy!r}")


class SGD:
    def __init__(self, lr=0.01):
        self.lr = lr

    def step(self, params, grads):
        for name, g in grads.items():
            params[name] = params[name] - self.lr * g
        return params


class Adam:
    """Adam with bias-corrected moment estimates."""

    def __init__(self, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, g in grads.items():
            m = b1 * self.m.get(name, 0.0) + (1 - b1) * g
            v = b2 * self.v.get(name, 0.0) + (1 - b2) * g * g
            self.m[name], self.v[name] = m, v
            mhat = m / (1 - b1**self.t)
            vhat = v / (1 - b2**self.t)
            params[name] = params[name] - self.lr * mhat / (np.sqrt(vhat) + self.eps)
        return params


def make_optimizer(name, lr):
    if name == "adam":
        return Adam(lr)
    if name == "sgd":
        return SGD(lr)
    raise ConfigError(f"unknown optimizer {name!r}")


def optimizer_step(network: Network, grads, optimizer):
    """Apply one optimizer update to the network parameters in place."""
    params = network.named_params()
    for name, g in grads.items():
        if params[name].shape != np.shape(g):
            raise ShapeError(f"{name}: gradient shape {np.shape(g)} != parameter shape {params[name].shape}")
    updated = optimizer.step(params, grads)
    for name, value in updated.items():
        network.set_param(name, value)
    return network
