"""Minimal dense-array numeric kernel.

Implements forward and backward passes for the small, fixed set of layers
used by the two network architectures in this project (a feature-space MLP
and a raw-signal 1-D CNN), plus softmax cross-entropy and an Adam update.
Everything operates on float64 numpy arrays; gradients are derived by hand
per layer rather than through a general autodiff graph, which keeps the
surface small enough to verify exhaustively against finite differences.

Conventions:
  * dense inputs are (batch, features); conv inputs are (batch, time, channels)
  * single samples (rank-1 / rank-2) are accepted by the public ops and
    promoted to a batch of one
  * conv1d uses cross-correlation semantics (no kernel flip), valid padding
  * global max pooling routes gradient to the first-occurring maximum
  * l2 penalties affect parameter gradients only, never input gradients
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class DimensionError(ValueError):
    """Raised when tensor shapes are inconsistent with a layer's contract."""


def _check_finite(name, a):
    if not np.all(np.isfinite(a)):
        raise FloatingPointError(f"{name} produced non-finite values")


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

@dataclass
class Dense:
    """Affine layer y = x @ weights + bias, optional l2 penalty on weights."""

    weights: np.ndarray  # (d_in, d_out)
    bias: np.ndarray     # (d_out,)
    l2: float = 0.0
    kind: str = field(default="dense", init=False)

    def forward(self, x, rng=None, train=False):
        if x.shape[-1] != self.weights.shape[0]:
            raise DimensionError(
                f"dense: input shape {x.shape} does not match weight shape "
                f"{self.weights.shape}"
            )
        return x @ self.weights + self.bias, x

    def backward(self, gy, cache):
        x = cache
        gw = x.T @ gy
        gb = gy.sum(axis=0)
        gx = gy @ self.weights.T
        return gx, [gw, gb]

    def params(self):
        return [self.weights, self.bias]

    def set_params(self, ps):
        self.weights, self.bias = ps

    def l2_penalty(self):
        return self.l2 * float(np.sum(self.weights ** 2))

    def l2_grads(self):
        return [2.0 * self.l2 * self.weights, np.zeros_like(self.bias)]


@dataclass
class Conv1D:
    """Valid cross-correlation over (batch, time, channels)."""

    weights: np.ndarray  # (kernel, channels_in, filters)
    bias: np.ndarray     # (filters,)
    stride: int = 1
    kind: str = field(default="conv1d", init=False)

    def _windows(self, x):
        k = self.weights.shape[0]
        b, t, c = x.shape
        t_out = (t - k) // self.stride + 1
        sb, st, sc = x.strides
        return np.lib.stride_tricks.as_strided(
            x, shape=(b, t_out, k, c), strides=(sb, st * self.stride, st, sc)
        )

    def forward(self, x, rng=None, train=False):
        k, c_in, _ = self.weights.shape
        if x.shape[-1] != c_in:
            raise DimensionError(
                f"conv1d: input channels {x.shape[-1]} != kernel channels {c_in}"
            )
        if x.shape[1] < k:
            raise DimensionError(
                f"conv1d: time length {x.shape[1]} shorter than kernel {k}"
            )
        win = self._windows(x)
        y = np.einsum("btkc,kcf->btf", win, self.weights) + self.bias
        return y, x

    def backward(self, gy, cache):
        x = cache
        win = self._windows(x)
        gw = np.einsum("btkc,btf->kcf", win, gy)
        gb = gy.sum(axis=(0, 1))
        # scatter the per-window contribution back onto the input timeline
        contrib = np.einsum("btf,kcf->btkc", gy, self.weights)
        gx = np.zeros_like(x)
        k = self.weights.shape[0]
        t_out = gy.shape[1]
        for j in range(k):
            gx[:, j : j + self.stride * t_out : self.stride, :] += contrib[:, :, j, :]
        return gx, [gw, gb]

    def params(self):
        return [self.weights, self.bias]

    def set_params(self, ps):
        self.weights, self.bias = ps

    def l2_penalty(self):
        return 0.0

    def l2_grads(self):
        return [np.zeros_like(self.weights), np.zeros_like(self.bias)]


@dataclass
class GlobalMaxPool1D:
    """Per-channel maximum over time; ties resolve to the lowest time index."""

    kind: str = field(default="globalmaxpool1d", init=False)

    def forward(self, x, rng=None, train=False):
        if x.ndim != 3 or x.shape[1] < 1:
            raise DimensionError(f"globalmaxpool1d: need (batch, time>=1, ch), got {x.shape}")
        idx = np.argmax(x, axis=1)  # first occurrence on ties
        y = np.take_along_axis(x, idx[:, None, :], axis=1)[:, 0, :]
        return y, (x.shape, idx)

    def backward(self, gy, cache):
        shape, idx = cache
        gx = np.zeros(shape)
        np.put_along_axis(gx, idx[:, None, :], gy[:, None, :], axis=1)
        return gx, None

    def params(self):
        return []

    def set_params(self, ps):
        pass

    def l2_penalty(self):
        return 0.0

    def l2_grads(self):
        return []


@dataclass
class ReLU:
    kind: str = field(default="relu", init=False)

    def forward(self, x, rng=None, train=False):
        mask = x > 0
        return x * mask, mask

    def backward(self, gy, cache):
        return gy * cache, None

    def params(self):
        return []

    def set_params(self, ps):
        pass

    def l2_penalty(self):
        return 0.0

    def l2_grads(self):
        return []


@dataclass
class Dropout:
    """Inverted dropout; active only when train=True and an rng is supplied."""

    rate: float
    kind: str = field(default="dropout", init=False)

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {self.rate}")

    def forward(self, x, rng=None, train=False):
        if not train or self.rate == 0.0:
            return x, None
        if rng is None:
            raise ValueError("dropout in training mode needs an rng")
        keep = (rng.random(x.shape) >= self.rate) / (1.0 - self.rate)
        return x * keep, keep

    def backward(self, gy, cache):
        if cache is None:
            return gy, None
        return gy * cache, None

    def params(self):
        return []

    def set_params(self, ps):
        pass

    def l2_penalty(self):
        return 0.0

    def l2_grads(self):
        return []


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def softmax(logits):
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, label):
    """Loss and logit gradient for a single rank-1 logit vector.

    Numerically stabilized by max subtraction; grad = softmax - onehot.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1:
        raise DimensionError(f"expected rank-1 logits, got shape {logits.shape}")
    if not 0 <= label < logits.shape[0]:
        raise ValueError(f"label {label} out of range for {logits.shape[0]} classes")
    z = logits - logits.max()
    lse = np.log(np.sum(np.exp(z)))
    loss = lse - z[label]
    grad = np.exp(z - lse)
    grad[label] -= 1.0
    return float(loss), grad


def softmax_cross_entropy_batch(logits, labels):
    """Mean loss over the batch and per-sample logit gradients (unscaled)."""
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    losses = lse[:, 0] - z[np.arange(len(labels)), labels]
    grads = np.exp(z - lse)
    grads[np.arange(len(labels)), labels] -= 1.0
    return float(losses.mean()), grads


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------

@dataclass
class GradientRecord:
    parameter_grads: list       # per layer, list of arrays (empty for param-free)
    input_grad: np.ndarray      # matches input shape


def _promote(x, conv):
    x = np.asarray(x, dtype=np.float64)
    want = 3 if conv else 2
    if x.ndim == want - 1:
        return x[None, ...], True
    if x.ndim != want:
        raise DimensionError(f"expected rank {want - 1} or {want} input, got shape {x.shape}")
    return x, False


class Network:
    """A sequential layer stack producing class logits.

    The loss attached to the logits is softmax cross-entropy; l2 penalties
    declared on dense layers join the training loss and its parameter
    gradients but, being independent of the input, never touch input
    gradients.
    """

    def __init__(self, layers):
        self.layers = list(layers)
        self._conv_input = any(l.kind == "conv1d" for l in self.layers)

    # -- forward ------------------------------------------------------------

    def logits(self, x, rng=None, train=False):
        x, squeeze = _promote(x, self._conv_input)
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x, rng=rng, train=train)
            caches.append(cache)
        _check_finite("forward", x)
        return (x[0] if squeeze else x), caches

    def scores(self, x):
        z, _ = self.logits(x)
        return softmax(z)

    # -- backward -----------------------------------------------------------

    def _backprop(self, grad_logits, caches):
        param_grads = [None] * len(self.layers)
        g = grad_logits
        for i in reversed(range(len(self.layers))):
            g, pg = self.layers[i].backward(g, caches[i])
            param_grads[i] = pg if pg is not None else []
        return g, param_grads

    def training_gradients(self, x, labels, rng=None):
        """Mean-batch loss (incl. l2 penalties) and its parameter gradients."""
        x, _ = _promote(x, self._conv_input)
        labels = np.asarray(labels)
        z, caches = self.logits(x, rng=rng, train=True)
        loss, gz = softmax_cross_entropy_batch(z, labels)
        _, param_grads = self._backprop(gz / len(labels), caches)
        for i, layer in enumerate(self.layers):
            loss += layer.l2_penalty()
            for pg, lg in zip(param_grads[i], layer.l2_grads()):
                pg += lg
        return loss, param_grads

    def input_gradient(self, x, labels):
        """Per-sample gradient of the per-sample cross-entropy w.r.t. the input.

        Runs in inference mode: dropout is disabled, so the gradient is a
        deterministic function of (parameters, x, labels).
        """
        xb, squeeze = _promote(x, self._conv_input)
        labels = np.atleast_1d(np.asarray(labels))
        z, caches = self.logits(xb)
        _, gz = softmax_cross_entropy_batch(z, labels)
        gx, _ = self._backprop(gz, caches)
        _check_finite("input_gradient", gx)
        return gx[0] if squeeze else gx

    def logit_combination_gradient(self, x, coeffs):
        """Per-sample gradient of sum_c coeffs[b, c] * logits[b, c] w.r.t. x."""
        xb, squeeze = _promote(x, self._conv_input)
        coeffs = np.atleast_2d(np.asarray(coeffs, dtype=np.float64))
        _, caches = self.logits(xb)
        gx, _ = self._backprop(coeffs, caches)
        return gx[0] if squeeze else gx

    def logit_jacobian(self, x):
        """(batch, n_classes, *input_shape) Jacobian of the logits."""
        xb, squeeze = _promote(x, self._conv_input)
        z, caches = self.logits(xb)
        n_classes = z.shape[1]
        rows = []
        for j in range(n_classes):
            seed = np.zeros_like(z)
            seed[:, j] = 1.0
            gx, _ = self._backprop(seed, caches)
            rows.append(gx)
        jac = np.stack(rows, axis=1)
        return jac[0] if squeeze else jac

    def gradient_record(self, x, label):
        """Full parameter + input gradients of the training loss."""
        xb, _ = _promote(x, self._conv_input)
        labels = np.atleast_1d(np.asarray(label))
        z, caches = self.logits(xb)
        _, gz = softmax_cross_entropy_batch(z, labels)
        gx, param_grads = self._backprop(gz / len(labels), caches)
        for i, layer in enumerate(self.layers):
            for pg, lg in zip(param_grads[i], layer.l2_grads()):
                pg += lg
        return GradientRecord(parameter_grads=param_grads, input_grad=gx)

    # -- parameters -----------------------------------------------------------

    def parameters(self):
        return [layer.params() for layer in self.layers]

    def set_parameters(self, per_layer):
        for layer, ps in zip(self.layers, per_layer):
            layer.set_params(ps)


def backward(network, x, label):
    """Spec-level entry: gradients of the loss for one input (or batch)."""
    if not isinstance(network, Network):
        network = Network(network)
    return network.gradient_record(x, label)


# ---------------------------------------------------------------------------
# spec-level single ops (thin wrappers over the layer classes)
# ---------------------------------------------------------------------------

def dense_forward(x, weights, bias, l2=0.0):
    x = np.asarray(x, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if x.shape[-1] != weights.shape[0]:
        raise DimensionError(
            f"dense: input shape {x.shape} does not match weight shape {weights.shape}"
        )
    layer = Dense(weights, np.asarray(bias, dtype=np.float64), l2=l2)
    xb = x[None, :] if x.ndim == 1 else x
    y, _ = layer.forward(xb)
    _check_finite("dense_forward", y)
    return y[0] if x.ndim == 1 else y


def conv1d_forward(x, weights, bias, stride=1):
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    x = np.asarray(x, dtype=np.float64)
    layer = Conv1D(np.asarray(weights, dtype=np.float64),
                   np.asarray(bias, dtype=np.float64), stride=stride)
    xb = x[None, ...] if x.ndim == 2 else x
    y, _ = layer.forward(xb)
    _check_finite("conv1d_forward", y)
    return y[0] if x.ndim == 2 else y


def global_max_pool1d(x):
    x = np.asarray(x, dtype=np.float64)
    xb = x[None, ...] if x.ndim == 2 else x
    y, _ = GlobalMaxPool1D().forward(xb)
    return y[0] if x.ndim == 2 else y


def conv1d_output_length(t, k, stride):
    if t < k:
        raise DimensionError(f"time length {t} shorter than kernel {k}")
    return (t - k) // stride + 1


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0


def adam_init(params):
    flat = [p for layer in params for p in layer]
    return AdamState(m=[np.zeros_like(p) for p in flat],
                     v=[np.zeros_like(p) for p in flat])


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update over nested [layer][param] lists; returns new values."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    flat_p = [p for layer in params for p in layer]
    flat_g = [g for layer in grads for g in layer]
    t = state.t + 1
    new_m, new_v, new_p = [], [], []
    for p, g, m, v in zip(flat_p, flat_g, state.m, state.v):
        if p.shape != g.shape:
            raise DimensionError(f"param shape {p.shape} != grad shape {g.shape}")
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        new_p.append(p - lr * m_hat / (np.sqrt(v_hat) + eps))
        new_m.append(m)
        new_v.append(v)
    out, i = [], 0
    for layer in params:
        out.append(new_p[i : i + len(layer)])
        i += len(layer)
    return out, AdamState(m=new_m, v=new_v, t=t)


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

def glorot_uniform(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def build_mlp(rng, d_in, hidden, n_classes, l2=0.001):
    """Feature-space classifier stack: dense/ReLU pairs then a logit layer."""
    layers = []
    d = d_in
    for h in hidden:
        w = glorot_uniform(rng, (d, h), d, h)
        layers.append(Dense(w, np.zeros(h), l2=l2))
        layers.append(ReLU())
        d = h
    w = glorot_uniform(rng, (d, n_classes), d, n_classes)
    layers.append(Dense(w, np.zeros(n_classes)))
    return Network(layers)


def build_cnn(rng, t_in, c_in, n_classes, dropout=0.3):
    """Raw-signal stack: two conv blocks, global max pool, dense head."""
    w1 = glorot_uniform(rng, (10, c_in, 100), 10 * c_in, 10 * 100)
    w2 = glorot_uniform(rng, (5, 100, 50), 5 * 100, 5 * 50)
    wd = glorot_uniform(rng, (50, 64), 50, 64)
    wo = glorot_uniform(rng, (64, n_classes), 64, n_classes)
    layers = [
        Conv1D(w1, np.zeros(100), stride=2),
        ReLU(),
        Conv1D(w2, np.zeros(50), stride=1),
        ReLU(),
        GlobalMaxPool1D(),
        Dense(wd, np.zeros(64)),
        ReLU(),
        Dropout(dropout),
        Dense(wo, np.zeros(n_classes)),
    ]
    return Network(layers)
