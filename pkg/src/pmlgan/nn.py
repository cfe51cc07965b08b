"""Small numpy neural-network core: layers, batch norm, Adam and a gradient checker.

Every layer exposes ``forward(x, train) -> (out, cache)`` and
``backward(grad, cache) -> (grad_in, param_grads)``. Caches are returned rather
than hidden so a network can be applied to several batches inside one loss
(the generator sees both disambiguated targets and prior samples) and the
parameter gradients of both paths summed by the caller.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

LEAKY_SLOPE = 0.2
BN_MOMENTUM = 0.9
BN_EPS = 1e-5

TRAIN = "train"
EVAL = "eval"


class ShapeError(ValueError):
    pass


def _as_matrix(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {x.shape}")
    return x


# ---------------------------------------------------------------------------
# primitive ops

def affine_forward(x, W, b) -> np.ndarray:
    x = _as_matrix(x)
    W = _as_matrix(W)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if x.shape[1] != W.shape[0] or W.shape[1] != b.shape[0]:
        raise ShapeError(f"affine: x{x.shape} W{W.shape} b{b.shape}")
    return x @ W + b


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activation_apply(kind: str, x, slope: float = LEAKY_SLOPE) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if kind == "sigmoid":
        return _sigmoid(x)
    if kind == "tanh":
        return np.tanh(x)
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "leaky_relu":
        if not 0.0 < slope < 1.0:
            raise ValueError(f"leaky relu slope must be in (0, 1), got {slope}")
        # equals x if x > 0 else slope * x because 0 < slope < 1
        return np.maximum(x, slope * x)
    raise ValueError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------------------
# layers

class Affine:
    kind = "affine"

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator | None = None,
                 bias: bool = True):
        rng = rng if rng is not None else np.random.default_rng(0)
        bound = 1.0 / np.sqrt(n_in)
        self.W = rng.uniform(-bound, bound, size=(n_in, n_out))
        # a bias feeding batch norm is cancelled by the mean subtraction
        self.bias = bias
        self.b = np.zeros(n_out)

    @property
    def n_in(self) -> int:
        return self.W.shape[0]

    @property
    def n_out(self) -> int:
        return self.W.shape[1]

    def params(self) -> list[np.ndarray]:
        return [self.W, self.b] if self.bias else [self.W]

    def forward(self, x, train):
        return affine_forward(x, self.W, self.b), x

    def backward(self, grad, cache):
        x = cache
        grads = [x.T @ grad, grad.sum(axis=0)] if self.bias else [x.T @ grad]
        return grad @ self.W.T, grads


class Activation:
    def __init__(self, kind: str, slope: float = LEAKY_SLOPE):
        activation_apply(kind, np.zeros(1), slope)  # validates kind and slope
        self.kind = kind
        self.slope = slope

    def params(self) -> list[np.ndarray]:
        return []

    def forward(self, x, train):
        out = activation_apply(self.kind, x, self.slope)
        return out, (x, out)

    def backward(self, grad, cache):
        x, out = cache
        if self.kind == "sigmoid":
            return grad * out * (1.0 - out), []
        if self.kind == "tanh":
            return grad * (1.0 - out * out), []
        if self.kind == "relu":
            return grad * (x > 0), []
        g = grad * self.slope
        pos = x > 0
        g[pos] = grad[pos]
        return g, []


class BatchNorm:
    kind = "batchnorm"

    def __init__(self, width: int, momentum: float = BN_MOMENTUM, eps: float = BN_EPS):
        if eps <= 0:
            raise ValueError("batchnorm epsilon must be positive")
        self.gamma = np.ones(width)
        self.shift = np.zeros(width)
        self.running_mean = np.zeros(width)
        self.running_var = np.ones(width)
        self.momentum = momentum
        self.eps = eps

    @property
    def width(self) -> int:
        return self.gamma.shape[0]

    def params(self) -> list[np.ndarray]:
        return [self.gamma, self.shift]

    def forward(self, x, train):
        if not train:
            xhat = (x - self.running_mean) / np.sqrt(self.running_var + self.eps)
            return self.gamma * xhat + self.shift, None
        m = x.shape[0]
        if m < 2:
            raise ShapeError("batch norm in train mode needs at least 2 rows")
        mu = x.mean(axis=0)
        var = x.var(axis=0)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu) * inv_std
        self.running_mean = self.momentum * self.running_mean + (1 - self.momentum) * mu
        self.running_var = self.momentum * self.running_var + (1 - self.momentum) * var
        return self.gamma * xhat + self.shift, (xhat, inv_std)

    def backward(self, grad, cache):
        if cache is None:
            raise RuntimeError("batch norm backward needs a train-mode forward")
        xhat, inv_std = cache
        m = grad.shape[0]
        dgamma = (grad * xhat).sum(axis=0)
        dshift = grad.sum(axis=0)
        dxhat = grad * self.gamma
        dx = inv_std / m * (m * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        return dx, [dgamma, dshift]


def batchnorm_forward(x, layer: BatchNorm, mode: str = TRAIN) -> np.ndarray:
    return layer.forward(_as_matrix(x), mode == TRAIN)[0]


# ---------------------------------------------------------------------------
# networks

class Network:
    """An ordered stack of layers.

    ``forward`` in train mode remembers its cache so ``backward`` can follow it;
    ``forward_cached`` hands the cache back instead for multi-use graphs.
    """

    def __init__(self, layers: list, n_in: int | None = None):
        self.layers = list(layers)
        widths = []
        for layer in self.layers:
            if isinstance(layer, Affine):
                widths.append((layer.n_in, layer.n_out))
            elif isinstance(layer, BatchNorm):
                widths.append((layer.width, layer.width))
        for (_, prev_out), (nxt_in, _) in zip(widths, widths[1:]):
            if prev_out != nxt_in:
                raise ShapeError(f"adjacent layer widths differ: {prev_out} -> {nxt_in}")
        if not widths and n_in is None:
            raise ShapeError("a network without affine layers needs an explicit n_in")
        self.n_in = widths[0][0] if widths else n_in
        self.n_out = widths[-1][1] if widths else n_in
        self._cache = None

    def params(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params()]

    def forward_cached(self, x, mode: str = TRAIN):
        x = _as_matrix(x)
        if x.shape[1] != self.n_in:
            raise ShapeError(f"network expects {self.n_in} input columns, got {x.shape[1]}")
        train = mode == TRAIN
        if x.shape[0] == 0:
            return np.zeros((0, self.n_out)), None
        caches = []
        for layer in self.layers:
            x, c = layer.forward(x, train)
            caches.append(c)
        return x, (caches if train else None)

    def forward(self, x, mode: str = TRAIN) -> np.ndarray:
        out, cache = self.forward_cached(x, mode)
        self._cache = cache
        return out

    __call__ = forward

    def backward(self, grad_out, cache=None):
        """Return ``(grad_in, param_grads)`` with grads aligned to ``params()``."""
        if cache is None:
            cache = self._cache
        if cache is None:
            raise RuntimeError("backward called without a preceding train-mode forward")
        grad = _as_matrix(grad_out)
        per_layer = []
        for layer, c in zip(reversed(self.layers), reversed(cache)):
            grad, pg = layer.backward(grad, c)
            per_layer.append(pg)
        grads = [g for pg in reversed(per_layer) for g in pg]
        return grad, grads


def network_forward(net: Network, x, mode: str = TRAIN) -> np.ndarray:
    return net.forward(x, mode)


def network_backward(net: Network, grad_out):
    return net.backward(grad_out)


def mlp(sizes: list[int], out_activation: str, rng: np.random.Generator,
        batchnorm_hidden: set[int] | None = None, slope: float = LEAKY_SLOPE) -> Network:
    """Affine stack ``sizes[0] -> ... -> sizes[-1]`` with LeakyReLU between layers.

    ``batchnorm_hidden`` holds 0-based hidden-layer indices that get a BatchNorm
    between the affine map and its activation.
    """
    batchnorm_hidden = batchnorm_hidden or set()
    layers = []
    n_affine = len(sizes) - 1
    for i in range(n_affine):
        bn = i < n_affine - 1 and i in batchnorm_hidden
        layers.append(Affine(sizes[i], sizes[i + 1], rng, bias=not bn))
        if i < n_affine - 1:
            if bn:
                layers.append(BatchNorm(sizes[i + 1]))
            layers.append(Activation("leaky_relu", slope))
    layers.append(Activation(out_activation))
    return Network(layers)


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState,
              ascend: bool = False) -> AdamState:
    """One in-place Adam update. ``ascend`` flips the sign for maximization."""
    if len(params) != len(grads):
        raise ShapeError("params and grads differ in length")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    sign = 1.0 if ascend else -1.0
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ShapeError(f"param {p.shape} vs grad {g.shape}")
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        p += sign * state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


class Adam:
    """Adam bound to a fixed parameter list."""

    def __init__(self, params: list[np.ndarray], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def step(self, grads, ascend: bool = False):
        adam_step(self.params, grads, self.state, ascend=ascend)


# ---------------------------------------------------------------------------
# verification

def roundoff_floor(loss_scale: float, h: float) -> float:
    """Absolute error central differences cannot resolve below."""
    return 10.0 * np.finfo(np.float64).eps * max(1.0, abs(loss_scale)) / h


def relative_error(analytic, numeric, atol: float = 0.0) -> float:
    """``max |a - n| / max(|a|, |n|, 1e-8)``; entries with ``|a - n| <= atol`` count as exact."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if not analytic.size:
        return 0.0
    diff = np.abs(analytic - numeric)
    diff[diff <= atol] = 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(diff / denom))


def numeric_grad(f, p: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` with respect to array ``p`` (perturbed in place)."""
    g = np.zeros_like(p)
    it = np.nditer(p, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = p[i]
        p[i] = old + h
        fp = f()
        p[i] = old - h
        fm = f()
        p[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def gradient_check(net: Network, loss_fn, x, h: float = 1e-5, tol: float | None = None) -> float:
    """Max relative error between backprop and central differences.

    ``loss_fn(out) -> (loss, dloss/dout)``. Covers every parameter and the input.
    ``tol`` only matters for the caller; the raw error is returned.
    """
    x = _as_matrix(x).copy()

    def loss_at():
        out, _ = net.forward_cached(x, TRAIN)
        return loss_fn(out)[0]

    out, cache = net.forward_cached(x, TRAIN)
    loss, dout = loss_fn(out)
    gin, grads = net.backward(dout, cache)
    atol = roundoff_floor(loss, h)
    err = 0.0
    for p, g in zip(net.params(), grads):
        err = max(err, relative_error(g, numeric_grad(loss_at, p, h), atol))
    err = max(err, relative_error(gin, numeric_grad(loss_at, x, h), atol))
    return err
