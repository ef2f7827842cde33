"""Small numpy layer kernel with hand-written backward passes.

Tensors are laid out (batch, length, channels). Each primitive comes as a
``*_forward`` returning ``(out, cache)`` and a ``*_backward`` taking the
upstream gradient and the cache. The layer classes at the bottom wrap these
with parameter storage.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BN_EPS = 1e-5
BN_MOMENTUM = 0.9
BCE_EPS = 1e-7


class ShapeError(ValueError):
    pass


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def same_padding(kernel: int) -> tuple[int, int]:
    left = (kernel - 1) // 2
    return left, kernel - 1 - left


def _correlate(x, w2d, kernel, pad):
    """im2col cross-correlation; returns (out2d, cols2d)."""
    B, n, cin = x.shape
    if kernel == 1:
        cols = x.reshape(B * n, cin)
        return cols @ w2d, cols
    xp = np.pad(x, ((0, 0), pad, (0, 0)))
    cols = sliding_window_view(xp, kernel, axis=1).reshape(B * n, cin * kernel)
    return cols @ w2d, cols


def conv1d_forward(x, w, b):
    """Stride-1 'same' cross-correlation.

    ``w`` has shape (filters, kernel, in_channels); for even kernels the
    extra pad sample goes on the right.
    """
    B, n, cin = x.shape
    cout, K, win = w.shape
    if win != cin:
        raise ShapeError(f"conv input has {cin} channels, weights expect {win}")
    w2d = w.transpose(2, 1, 0).reshape(cin * K, cout)
    out, cols = _correlate(x, w2d, K, same_padding(K))
    out = out.reshape(B, n, cout) + b
    return out, (x.shape, w, cols)


def conv1d_backward(dy, cache):
    (B, n, cin), w, cols = cache
    cout, K, _ = w.shape
    dy2 = dy.reshape(B * n, cout)
    dw = (cols.T @ dy2).reshape(cin, K, cout).transpose(2, 1, 0)
    db = dy2.sum(axis=0)
    # input gradient is a correlation of dy with the flipped, transposed kernel
    left, right = same_padding(K)
    # rows follow the im2col ordering: channel-major, tap-minor
    wf2d = w[:, ::-1, :].reshape(cout * K, cin)
    dx, _ = _correlate(dy, wf2d, K, (right, left))
    return dx.reshape(B, n, cin), dw, db


# ---------------------------------------------------------------------------
# batch norm
# ---------------------------------------------------------------------------


def batchnorm_forward(x, gamma, beta, running_mean, running_var, train: bool,
                      momentum: float = BN_MOMENTUM, eps: float = BN_EPS):
    """Per-channel normalisation over batch and length.

    In train mode the running statistics arrays are updated in place.
    """
    if train:
        mu = x.mean(axis=(0, 1))
        var = x.var(axis=(0, 1))
        running_mean *= momentum
        running_mean += (1 - momentum) * mu
        running_var *= momentum
        running_var += (1 - momentum) * var
    else:
        mu, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    return gamma * xhat + beta, (xhat, inv, gamma, train)


def batchnorm_backward(dy, cache):
    xhat, inv, gamma, train = cache
    dgamma = (dy * xhat).sum(axis=(0, 1))
    dbeta = dy.sum(axis=(0, 1))
    dxhat = dy * gamma
    if not train:
        return dxhat * inv, dgamma, dbeta
    count = dy.shape[0] * dy.shape[1]
    dx = inv / count * (
        count * dxhat - dxhat.sum(axis=(0, 1)) - xhat * (dxhat * xhat).sum(axis=(0, 1))
    )
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# elementwise / structural
# ---------------------------------------------------------------------------


def relu_forward(x):
    return np.maximum(x, 0), x > 0


def relu_backward(dy, mask):
    return dy * mask


def dropout_forward(x, rate: float, train: bool, rng: np.random.Generator | None):
    """Inverted dropout; identity when not training or rate is 0."""
    if not 0 <= rate < 1:
        raise ValueError("dropout rate must be in [0, 1)")
    if not train or rate == 0:
        return x, None
    keep = rng.random(x.shape) >= rate
    scale = np.asarray(1.0 / (1.0 - rate), dtype=x.dtype)
    mask = keep * scale
    return x * mask, mask


def dropout_backward(dy, mask):
    return dy if mask is None else dy * mask


def maxpool2_forward(x):
    B, n, C = x.shape
    if n % 2:
        raise ShapeError(f"max pooling needs an even length, got {n}")
    pairs = x.reshape(B, n // 2, 2, C)
    # ties resolve to the earlier element
    second = pairs[:, :, 1, :] > pairs[:, :, 0, :]
    return np.where(second, pairs[:, :, 1, :], pairs[:, :, 0, :]), second


def maxpool2_backward(dy, second):
    B, h, C = dy.shape
    dx = np.zeros((B, h, 2, C), dtype=dy.dtype)
    dx[:, :, 0, :] = np.where(second, 0, dy)
    dx[:, :, 1, :] = np.where(second, dy, 0)
    return dx.reshape(B, 2 * h, C)


def upsample_repeat(x, factor: int):
    if factor < 1 or int(factor) != factor:
        raise ValueError("upsample factor must be a positive integer")
    return x if factor == 1 else np.repeat(x, factor, axis=1)


def upsample_repeat_backward(dy, factor: int):
    if factor == 1:
        return dy
    B, n, C = dy.shape
    return dy.reshape(B, n // factor, factor, C).sum(axis=2)


def concat_channels(tensors):
    lengths = {t.shape[:-1] for t in tensors}
    if len(lengths) != 1:
        raise ShapeError(f"cannot concatenate tensors of lengths {sorted(lengths)}")
    return np.concatenate(tensors, axis=-1)


def concat_channels_backward(dy, widths):
    return np.split(dy, np.cumsum(widths)[:-1], axis=-1)


def softmax_channels(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(dy, s):
    return s * (dy - (dy * s).sum(axis=-1, keepdims=True))


# ---------------------------------------------------------------------------
# loss, init, optimiser
# ---------------------------------------------------------------------------


def bce_loss(scores, targets, eps: float = BCE_EPS):
    """Summed binary cross-entropy over classes and its gradient w.r.t. scores.

    Scores are clamped to [eps, 1 - eps]; the gradient is zero where the
    clamp is active.
    """
    s = np.asarray(scores, dtype=float) if not isinstance(scores, np.ndarray) else scores
    t = np.asarray(targets, dtype=s.dtype)
    sc = np.clip(s, eps, 1 - eps)
    loss = -np.sum(t * np.log(sc) + (1 - t) * np.log(1 - sc))
    grad = (-t / sc + (1 - t) / (1 - sc)) * ((s > eps) & (s < 1 - eps))
    return float(loss), grad


def he_init(shape, fan_in: int, seed=None, dtype=np.float64):
    """Zero-mean normal draws with variance 2 / fan_in."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Adam:
    """Adam with bias-corrected moments; state keyed by parameter name."""

    def __init__(self, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        """Update ``params`` in place."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


def adam_step(params: dict, grads: dict, opt: Adam) -> None:
    opt.step(params, grads)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


class Layer:
    params: dict[str, np.ndarray]
    grads: dict[str, np.ndarray]

    def __init__(self):
        self.params, self.grads, self.buffers = {}, {}, {}

    def zero_grad(self):
        for k, p in self.params.items():
            self.grads[k] = np.zeros_like(p)


class Conv1D(Layer):
    def __init__(self, in_ch, filters, kernel, rng, dtype=np.float32, init_scale=1.0):
        super().__init__()
        w = he_init((filters, kernel, in_ch), kernel * in_ch, rng, np.float64) * init_scale
        self.params["w"] = w.astype(dtype)
        self.params["b"] = np.zeros(filters, dtype=dtype)
        self.zero_grad()

    def forward(self, x, train=False, rng=None):
        y, self._cache = conv1d_forward(x, self.params["w"], self.params["b"])
        return y

    def backward(self, dy):
        dx, dw, db = conv1d_backward(dy, self._cache)
        self.grads["w"] += dw
        self.grads["b"] += db
        self._cache = None
        return dx


class BatchNorm(Layer):
    def __init__(self, channels, dtype=np.float32):
        super().__init__()
        self.params["gamma"] = np.ones(channels, dtype=dtype)
        self.params["beta"] = np.zeros(channels, dtype=dtype)
        self.buffers["mean"] = np.zeros(channels, dtype=dtype)
        self.buffers["var"] = np.ones(channels, dtype=dtype)
        self.zero_grad()

    def forward(self, x, train=False, rng=None):
        y, self._cache = batchnorm_forward(
            x, self.params["gamma"], self.params["beta"],
            self.buffers["mean"], self.buffers["var"], train,
        )
        return y

    def backward(self, dy):
        dx, dg, db = batchnorm_backward(dy, self._cache)
        self.grads["gamma"] += dg
        self.grads["beta"] += db
        self._cache = None
        return dx


class ReLU(Layer):
    def forward(self, x, train=False, rng=None):
        y, self._mask = relu_forward(x)
        return y

    def backward(self, dy):
        return relu_backward(dy, self._mask)


class Dropout(Layer):
    def __init__(self, rate):
        super().__init__()
        self.rate = rate

    def forward(self, x, train=False, rng=None):
        y, self._mask = dropout_forward(x, self.rate, train, rng)
        return y

    def backward(self, dy):
        return dropout_backward(dy, self._mask)


class Sequential(Layer):
    def __init__(self, *layers):
        super().__init__()
        self.layers = list(layers)

    def forward(self, x, train=False, rng=None):
        for layer in self.layers:
            x = layer.forward(x, train, rng)
        return x

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy
