"""Minimal dense/conv network engine with exact backpropagation.

Parameters live in layer objects as float64 arrays; the flattened
concatenation of all weights and biases in layer order is the parameter
vector that the federation and attack code trades in. Layer ``forward``
returns ``(output, cache)`` and ``backward`` consumes the cache, so a model
can serve concurrent passes without hidden state.

Class labels are 0-based everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DimensionError, DomainError

PROB_FLOOR = 1e-12  # clamp for log() in the loss


class Layer:
    """Base layer. Subclasses implement forward/backward; params are views."""

    def params(self) -> list[np.ndarray]:
        return []

    def forward(self, x: np.ndarray):
        raise NotImplementedError

    def backward(self, cache, grad_out: np.ndarray):
        """Return (grad_input, [grad per param array])."""
        raise NotImplementedError


class Dense(Layer):
    """Affine map y = x @ w + b with w of shape (in_dim, out_dim)."""

    def __init__(self, in_dim: int, out_dim: int):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.w = np.zeros((in_dim, out_dim))
        self.b = np.zeros(out_dim)

    def params(self):
        return [self.w, self.b]

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise DimensionError(
                f"dense layer expects (n, {self.in_dim}), got {x.shape}")
        return x @ self.w + self.b, x

    def backward(self, cache, grad_out):
        x = cache
        return grad_out @ self.w.T, [x.T @ grad_out, grad_out.sum(axis=0)]


class Conv2D(Layer):
    """Valid-padding 2D convolution over (n, planes, h, w) inputs."""

    def __init__(self, in_planes: int, out_planes: int, kernel: int = 5, stride: int = 1):
        self.in_planes = in_planes
        self.out_planes = out_planes
        self.kernel = kernel
        self.stride = stride
        self.w = np.zeros((out_planes, in_planes, kernel, kernel))
        self.b = np.zeros(out_planes)

    def params(self):
        return [self.w, self.b]

    def _cols(self, x):
        k, s = self.kernel, self.stride
        win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
        win = win[:, :, ::s, ::s]
        n, c, oh, ow = win.shape[:4]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * k * k)
        return np.ascontiguousarray(cols), oh, ow

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.in_planes:
            raise DimensionError(
                f"conv layer expects (n, {self.in_planes}, h, w), got {x.shape}")
        if x.shape[2] < self.kernel or x.shape[3] < self.kernel:
            raise DimensionError(
                f"conv input {x.shape[2]}x{x.shape[3]} smaller than kernel {self.kernel}")
        cols, oh, ow = self._cols(x)
        out = cols @ self.w.reshape(self.out_planes, -1).T + self.b
        n = x.shape[0]
        y = out.reshape(n, oh, ow, self.out_planes).transpose(0, 3, 1, 2)
        return y, (x.shape, cols, oh, ow)

    def backward(self, cache, grad_out):
        x_shape, cols, oh, ow = cache
        n, c = x_shape[0], x_shape[1]
        k, s = self.kernel, self.stride
        dyf = grad_out.transpose(0, 2, 3, 1).reshape(n * oh * ow, self.out_planes)
        dw = (dyf.T @ cols).reshape(self.w.shape)
        db = dyf.sum(axis=0)
        dcols = (dyf @ self.w.reshape(self.out_planes, -1))
        dcols = dcols.reshape(n, oh, ow, c, k, k).transpose(0, 3, 1, 2, 4, 5)
        dx = np.zeros(x_shape)
        for i in range(k):
            for j in range(k):
                dx[:, :, i:i + s * oh:s, j:j + s * ow:s] += dcols[:, :, :, :, i, j]
        return dx, [dw, db]


class ReLU(Layer):
    def forward(self, x):
        return np.maximum(x, 0.0), x

    def backward(self, cache, grad_out):
        return grad_out * (cache > 0), []


class Flatten(Layer):
    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, cache, grad_out):
        return grad_out.reshape(cache), []


class Softmax(Layer):
    """Row-wise softmax; max-subtracted for stability."""

    def forward(self, x):
        z = x - x.max(axis=1, keepdims=True)
        e = np.exp(z)
        p = e / e.sum(axis=1, keepdims=True)
        return p, p

    def backward(self, cache, grad_out):
        p = cache
        inner = (grad_out * p).sum(axis=1, keepdims=True)
        return p * (grad_out - inner), []


class Model:
    """Layer stack plus the index of the designated feature layer.

    ``feature_layer`` points at the post-activation output used as the
    latent feature representation (the ReLU after the penultimate dense
    layer in the stock architectures).
    """

    def __init__(self, layers: list[Layer], feature_layer: int | None = None,
                 input_shape: tuple[int, ...] | None = None):
        self.layers = layers
        self.feature_layer = feature_layer
        self.input_shape = input_shape

    def param_arrays(self) -> list[np.ndarray]:
        return [a for layer in self.layers for a in layer.params()]

    @property
    def num_params(self) -> int:
        return sum(a.size for a in self.param_arrays())

    def param_slices(self) -> list[tuple[int, int, tuple[int, ...]]]:
        """(start, stop, shape) of each parameter array in the flat vector."""
        out, pos = [], 0
        for a in self.param_arrays():
            out.append((pos, pos + a.size, a.shape))
            pos += a.size
        return out

    def get_params(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.param_arrays()])

    def set_params(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.ndim != 1 or vec.size != self.num_params:
            raise DimensionError(
                f"parameter vector of length {vec.size} does not match model "
                f"with {self.num_params} parameters")
        pos = 0
        for a in self.param_arrays():
            a[...] = vec[pos:pos + a.size].reshape(a.shape)
            pos += a.size

    def validate_input(self, x: np.ndarray) -> None:
        if self.input_shape is not None and tuple(x.shape[1:]) != tuple(self.input_shape):
            raise DimensionError(
                f"batch of shape {x.shape} does not match model input {self.input_shape}")

    def last_dense_index(self) -> int:
        for i in range(len(self.layers) - 1, -1, -1):
            if isinstance(self.layers[i], Dense):
                return i
        raise ConfigurationError("model has no dense layer")


def forward(model: Model, batch: np.ndarray) -> np.ndarray:
    """Class probabilities, one row per sample."""
    x = np.asarray(batch, dtype=np.float64)
    model.validate_input(x)
    for layer in model.layers:
        x, _ = layer.forward(x)
    return x


def predict(model: Model, batch: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Argmax class per sample, evaluated in chunks to bound memory."""
    batch = np.asarray(batch, dtype=np.float64)
    out = np.empty(batch.shape[0], dtype=np.int64)
    for lo in range(0, batch.shape[0], chunk):
        out[lo:lo + chunk] = forward(model, batch[lo:lo + chunk]).argmax(axis=1)
    return out


def probabilities(model: Model, batch: np.ndarray, chunk: int = 256) -> np.ndarray:
    batch = np.asarray(batch, dtype=np.float64)
    parts = [forward(model, batch[lo:lo + chunk]) for lo in range(0, batch.shape[0], chunk)]
    return np.concatenate(parts, axis=0)


def cross_entropy(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean negative log-probability of the true class."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if labels.shape[0] != probs.shape[0]:
        raise DimensionError(
            f"{probs.shape[0]} probability rows but {labels.shape[0]} labels")
    c = probs.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise DomainError(f"labels must lie in [0, {c}), got range "
                          f"[{labels.min()}, {labels.max()}]")
    p_true = probs[np.arange(probs.shape[0]), labels]
    return float(np.mean(-np.log(np.maximum(p_true, PROB_FLOOR))))


def backward(model: Model, batch: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Exact gradient of mean cross-entropy w.r.t. the flat parameter vector.

    The final softmax is fused with the loss, which is the numerically
    stable route and analytically identical to chaining the two.
    """
    x = np.asarray(batch, dtype=np.float64)
    labels = np.asarray(labels)
    model.validate_input(x)
    if not isinstance(model.layers[-1], Softmax):
        raise ConfigurationError("backward requires a softmax output layer")
    caches = []
    for layer in model.layers[:-1]:
        x, cache = layer.forward(x)
        caches.append(cache)
    probs, _ = model.layers[-1].forward(x)
    n, c = probs.shape
    if labels.min() < 0 or labels.max() >= c:
        raise DomainError(f"labels must lie in [0, {c})")
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    param_grads: list[np.ndarray] = []
    for layer, cache in zip(reversed(model.layers[:-1]), reversed(caches)):
        grad, pg = layer.backward(cache, grad)
        param_grads = pg + param_grads
    return np.concatenate([g.ravel() for g in param_grads]) if param_grads else np.zeros(0)


def extract_features(model: Model, batch: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Latent feature vectors from the designated feature layer."""
    if model.feature_layer is None:
        raise ConfigurationError("model has no designated feature layer")
    batch = np.asarray(batch, dtype=np.float64)
    model.validate_input(batch)
    parts = []
    for lo in range(0, batch.shape[0], chunk):
        x = batch[lo:lo + chunk]
        for layer in model.layers[:model.feature_layer + 1]:
            x, _ = layer.forward(x)
        parts.append(x)
    return np.concatenate(parts, axis=0)


def last_fc_gradient(model: Model, samples: np.ndarray, assigned_class: int,
                     include_bias: bool = False) -> list[np.ndarray]:
    """Gradient of the sum of per-sample cross-entropies toward one class,
    taken w.r.t. the final dense layer only.

    For softmax output the gradient of a single sample is the outer product
    of its feature vector with (p - onehot(assigned_class)); the result here
    is that expression summed (not averaged) over all samples.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.shape[0] == 0:
        raise DomainError("last_fc_gradient needs at least one sample")
    model.validate_input(samples)
    idx = model.last_dense_index()
    if idx != len(model.layers) - 2 or not isinstance(model.layers[-1], Softmax):
        raise ConfigurationError(
            "last_fc_gradient requires the final dense layer to feed the softmax directly")
    dense: Dense = model.layers[idx]
    if not 0 <= assigned_class < dense.out_dim:
        raise DomainError(f"assigned class {assigned_class} out of range")
    h = samples
    for layer in model.layers[:idx]:
        h, _ = layer.forward(h)
    logits, _ = dense.forward(h)
    p, _ = model.layers[-1].forward(logits)
    d = p.copy()
    d[:, assigned_class] -= 1.0
    grads = [h.T @ d]
    if include_bias:
        grads.append(d.sum(axis=0))
    return grads


def norm_diff(a: np.ndarray, b: np.ndarray) -> float:
    """l2 norm of a - b."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"length mismatch: {a.shape} vs {b.shape}")
    return float(np.linalg.norm(a - b))


@dataclass
class AdamState:
    """Adam moments with bias correction. Moments start at zero."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_adam(num_params: int, lr: float = 0.001) -> AdamState:
    return AdamState(m=np.zeros(num_params), v=np.zeros(num_params), lr=lr)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState) -> np.ndarray:
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise DimensionError("params, grads and moments must have equal length")
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = state.m / (1.0 - state.beta1 ** state.step)
    v_hat = state.v / (1.0 - state.beta2 ** state.step)
    return params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


def _he_uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


def _glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def build_cnn(input_shape: tuple[int, int, int] = (1, 28, 28), num_classes: int = 10,
              feature_dim: int = 200, rng: np.random.Generator | None = None) -> Model:
    """Stock image classifier: two 5x5 valid convs (20 and 50 planes, stride 1),
    each ReLU-activated, then a flatten, a feature_dim dense+ReLU whose output
    is the latent feature vector, and a final dense into softmax.

    ``rng=None`` leaves every weight at zero, for models whose parameters get
    overwritten immediately.
    """
    planes, h, w = input_shape
    c1 = Conv2D(planes, 20, kernel=5, stride=1)
    c2 = Conv2D(20, 50, kernel=5, stride=1)
    flat_dim = 50 * (h - 8) * (w - 8)
    d1 = Dense(flat_dim, feature_dim)
    d2 = Dense(feature_dim, num_classes)
    if rng is not None:
        c1.w[...] = _he_uniform(rng, planes * 25, c1.w.shape)
        c2.w[...] = _he_uniform(rng, 20 * 25, c2.w.shape)
        d1.w[...] = _he_uniform(rng, flat_dim, d1.w.shape)
        d2.w[...] = _glorot_uniform(rng, feature_dim, num_classes, d2.w.shape)
    layers = [c1, ReLU(), c2, ReLU(), Flatten(), d1, ReLU(), d2, Softmax()]
    return Model(layers, feature_layer=6, input_shape=input_shape)


def build_mlp(input_dim: int, hidden: tuple[int, ...] = (), feature_dim: int = 200,
              num_classes: int = 10, rng: np.random.Generator | None = None) -> Model:
    """Dense variant of the stock architecture for vector inputs.

    ``hidden`` sizes precede the feature layer; the feature layer itself is a
    dense+ReLU of width ``feature_dim`` feeding the classifier head.
    """
    layers: list[Layer] = []
    dims = [input_dim, *hidden, feature_dim]
    for i in range(len(dims) - 1):
        d = Dense(dims[i], dims[i + 1])
        if rng is not None:
            d.w[...] = _he_uniform(rng, dims[i], d.w.shape)
        layers += [d, ReLU()]
    head = Dense(feature_dim, num_classes)
    if rng is not None:
        head.w[...] = _glorot_uniform(rng, feature_dim, num_classes, head.w.shape)
    feature_layer = len(layers) - 1
    layers += [head, Softmax()]
    return Model(layers, feature_layer=feature_layer, input_shape=(input_dim,))
