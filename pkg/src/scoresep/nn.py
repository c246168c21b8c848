"""Differentiable building blocks with hand-written backward passes.

Every block follows the same protocol: ``forward(x)`` caches what it needs,
``backward(grad_out)`` returns the gradient w.r.t. ``x`` and *accumulates*
parameter gradients into ``Param.grad``.  Features live on the last axis;
all leading axes are treated as independent rows, except for :class:`BiLSTM`
which reads ``(..., batch, time, features)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Iterator, Optional, Tuple

import numpy as np
from scipy.special import expit


class ShapeError(ValueError):
    pass


@dataclass(eq=False)
class Param:
    value: np.ndarray
    grad: np.ndarray = None

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape


def uniform_init(rng, shape, fan_in, dtype=np.float64):
    k = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-k, k, size=shape).astype(dtype)


class Module:
    """Minimal container: named params, named child modules, train/eval flag."""

    training = True

    def __init__(self):
        self._params: Dict[str, Param] = {}
        self._children: Dict[str, "Module"] = {}

    def add_param(self, name, value) -> Param:
        p = Param(np.asarray(value))
        self._params[name] = p
        return p

    def add_child(self, name, module):
        self._children[name] = module
        return module

    def named_params(self, prefix: str = "") -> Iterator[Tuple[str, Param]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_params(f"{prefix}{name}/")

    def param_dict(self) -> Dict[str, Param]:
        return dict(self.named_params())

    def n_params(self) -> int:
        return sum(p.value.size for _, p in self.named_params())

    def zero_grad(self):
        for _, p in self.named_params():
            p.grad[...] = 0.0

    def train(self, mode: bool = True):
        self.training = mode
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name, child in self._children.items():
            yield from child.buffers(f"{prefix}{name}/")

    def astype(self, dtype):
        for _, p in self.named_params():
            p.value = p.value.astype(dtype)
            p.grad = np.zeros_like(p.value)
        return self


# ---------------------------------------------------------------------------
# Linear
# ---------------------------------------------------------------------------


class Linear(Module):
    def __init__(self, in_features, out_features, bias=True, rng=None, dtype=np.float64):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_features = in_features
        self.out_features = out_features
        self.weight = self.add_param(
            "weight", uniform_init(rng, (in_features, out_features), in_features, dtype)
        )
        self.bias = None
        if bias:
            self.bias = self.add_param(
                "bias", uniform_init(rng, (out_features,), in_features, dtype)
            )

    def forward(self, x):
        if x.shape[-1] != self.in_features:
            raise ShapeError(f"expected {self.in_features} input features, got {x.shape[-1]}")
        self._x = x
        y = x @ self.weight.value
        if self.bias is not None:
            y = y + self.bias.value
        return y

    def backward(self, grad):
        x = self._x
        x2 = x.reshape(-1, self.in_features)
        g2 = grad.reshape(-1, self.out_features)
        self.weight.grad += x2.T @ g2
        if self.bias is not None:
            self.bias.grad += g2.sum(axis=0)
        return grad @ self.weight.value.T


def linear(x, weights, bias=None):
    """Functional form: ``x @ W + b``."""
    if x.shape[-1] != weights.shape[0]:
        raise ShapeError(f"cannot multiply {x.shape} by {weights.shape}")
    y = x @ weights
    return y if bias is None else y + bias


# ---------------------------------------------------------------------------
# Batch normalisation
# ---------------------------------------------------------------------------


class BatchNorm(Module):
    """Per-feature normalisation over all leading axes (frames act as samples)."""

    def __init__(self, features, momentum=0.1, eps=1e-5, dtype=np.float64):
        super().__init__()
        if eps <= 0:
            raise ValueError("epsilon must be positive")
        self.features = features
        self.momentum = momentum
        self.eps = eps
        self.gamma = self.add_param("gamma", np.ones(features, dtype=dtype))
        self.beta = self.add_param("beta", np.zeros(features, dtype=dtype))
        self.running_mean = np.zeros(features)
        self.running_var = np.ones(features)

    def buffers(self, prefix=""):
        yield prefix + "running_mean", self.running_mean
        yield prefix + "running_var", self.running_var

    def forward(self, x):
        if x.shape[-1] != self.features:
            raise ShapeError(f"expected {self.features} features, got {x.shape[-1]}")
        x2 = x.reshape(-1, self.features)
        if self.training:
            n = x2.shape[0]
            if n < 2:
                raise ShapeError("training-mode batch norm needs at least 2 rows")
            mean = x2.mean(axis=0)
            var = x2.var(axis=0)
            m = self.momentum
            self.running_mean[...] = (1 - m) * self.running_mean + m * mean
            self.running_var[...] = (1 - m) * self.running_var + m * var * n / (n - 1)
        else:
            mean = self.running_mean
            var = self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x2 - mean) * inv_std
        self._cache = (xhat, inv_std, x.shape)
        y = xhat * self.gamma.value + self.beta.value
        return y.reshape(x.shape).astype(x.dtype, copy=False)

    def backward(self, grad):
        xhat, inv_std, shape = self._cache
        g2 = grad.reshape(-1, self.features)
        self.gamma.grad += (g2 * xhat).sum(axis=0)
        self.beta.grad += g2.sum(axis=0)
        dxhat = g2 * self.gamma.value
        if not self.training:
            return (dxhat * inv_std).reshape(shape)
        n = g2.shape[0]
        dx = (inv_std / n) * (
            n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0)
        )
        return dx.reshape(shape)


# ---------------------------------------------------------------------------
# Activations
# ---------------------------------------------------------------------------


class Activation(Module):
    def __init__(self, kind: str):
        super().__init__()
        if kind not in ("tanh", "relu"):
            raise ValueError(f"unknown activation {kind!r}")
        self.kind = kind

    def forward(self, x):
        if self.kind == "tanh":
            y = np.tanh(x)
            self._cache = y
        else:
            y = np.maximum(x, 0)
            self._cache = x > 0
        return y

    def backward(self, grad):
        if self.kind == "tanh":
            return grad * (1.0 - self._cache**2)
        return grad * self._cache


def activation(x, kind: str):
    return Activation(kind).forward(x)


# ---------------------------------------------------------------------------
# Bidirectional LSTM
# ---------------------------------------------------------------------------


class BiLSTM(Module):
    """Stacked bidirectional LSTM, optionally with ``groups`` independent copies.

    Input is ``(groups, batch, time, in)`` when ``groups`` is set, else
    ``(batch, time, in)`` or ``(time, in)``.  Output width is ``2 * hidden``
    with the forward direction first.  Each group has its own weights, which
    is how per-branch LSTMs run in one vectorised loop.

    Gate layout along the ``4 * hidden`` axis is input, forget, cell, output.
    One bias vector per direction and layer.
    """

    def __init__(self, in_features, hidden, layers=1, groups=None, rng=None, dtype=np.float64):
        super().__init__()
        if layers < 1:
            raise ValueError("need at least one layer")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_features = in_features
        self.hidden = hidden
        self.layers = layers
        self.groups = groups
        g = groups or 1
        self._w = []
        for layer in range(layers):
            n_in = in_features if layer == 0 else 2 * hidden
            wx = self.add_param(f"l{layer}/w_in", uniform_init(rng, (g, 2, n_in, 4 * hidden), hidden, dtype))
            wh = self.add_param(f"l{layer}/w_hid", uniform_init(rng, (g, 2, hidden, 4 * hidden), hidden, dtype))
            b = self.add_param(f"l{layer}/bias", uniform_init(rng, (g, 2, 4 * hidden), hidden, dtype))
            self._w.append((wx, wh, b))

    def _to4d(self, x):
        if self.groups is not None:
            if x.ndim != 4 or x.shape[0] != self.groups:
                raise ShapeError(f"expected ({self.groups}, batch, time, in), got {x.shape}")
            return x
        if x.ndim == 2:
            return x[None, None]
        if x.ndim == 3:
            return x[None]
        raise ShapeError(f"expected (batch, time, in) or (time, in), got {x.shape}")

    def forward(self, x):
        self._in_shape = x.shape
        h = self._to4d(x)
        if h.shape[-1] != self.in_features:
            raise ShapeError(f"expected {self.in_features} input features, got {h.shape[-1]}")
        self._caches = []
        for wx, wh, b in self._w:
            h, cache = _bilstm_layer_forward(h, wx.value, wh.value, b.value)
            self._caches.append(cache)
        return h.reshape(self._in_shape[:-1] + (2 * self.hidden,))

    def backward(self, grad):
        g = self._to4d(grad)
        for (wx, wh, b), cache in zip(reversed(self._w), reversed(self._caches)):
            g, dwx, dwh, db = _bilstm_layer_backward(g, cache, wx.value, wh.value)
            wx.grad += dwx
            wh.grad += dwh
            b.grad += db
        return g.reshape(self._in_shape)


def _rows(a):
    # (T, G, 2, B, K) -> (G, 2, T*B, K)
    T, G, D, B, K = a.shape
    return np.ascontiguousarray(a.transpose(1, 2, 0, 3, 4)).reshape(G, D, T * B, K)


def _project(a, w):
    """(T, G, 2, B, I) @ (G, 2, I, K) -> (T, G, 2, B, K)."""
    T, G, D, B, _ = a.shape
    out = np.matmul(_rows(a), w)
    return out.reshape(G, D, T, B, -1).transpose(2, 0, 1, 3, 4)


def _outer(a, b):
    """Sum over time and batch of a^T b per group and direction."""
    return np.matmul(np.swapaxes(_rows(a), -1, -2), _rows(b))


def _bilstm_layer_forward(x, wx, wh, b):
    # x: (G, B, T, I); internals are time-major (T, G, 2, B, .)
    G, B, T, _ = x.shape
    H = wh.shape[2]
    xt = np.moveaxis(x, 2, 0)  # (T, G, B, I)
    xd = np.stack([xt, xt[::-1]], axis=2)  # (T, G, 2, B, I)
    pre = _project(xd, wx) + b[None, :, :, None, :]
    dtype = pre.dtype
    h_prev = np.zeros((T, G, 2, B, H), dtype)
    c_prev = np.zeros((T, G, 2, B, H), dtype)
    gates = np.empty((T, G, 2, B, 4 * H), dtype)
    tanh_c = np.empty((T, G, 2, B, H), dtype)
    hs = np.empty((T, G, 2, B, H), dtype)
    h = np.zeros((G, 2, B, H), dtype)
    c = np.zeros((G, 2, B, H), dtype)
    for t in range(T):
        h_prev[t] = h
        c_prev[t] = c
        z = pre[t] + np.matmul(h, wh)
        a = gates[t]
        a[..., : 2 * H] = expit(z[..., : 2 * H])
        a[..., 2 * H : 3 * H] = np.tanh(z[..., 2 * H : 3 * H])
        a[..., 3 * H :] = expit(z[..., 3 * H :])
        c = a[..., H : 2 * H] * c + a[..., :H] * a[..., 2 * H : 3 * H]
        tc = np.tanh(c)
        tanh_c[t] = tc
        h = a[..., 3 * H :] * tc
        hs[t] = h
    out = np.concatenate([hs[:, :, 0], hs[::-1, :, 1]], axis=-1)  # (T, G, B, 2H)
    cache = (xd, h_prev, c_prev, gates, tanh_c)
    return np.moveaxis(out, 0, 2), cache


def _bilstm_layer_backward(grad, cache, wx, wh):
    xd, h_prev, c_prev, gates, tanh_c = cache
    T, G, _, B, H = h_prev.shape
    gt = np.moveaxis(grad, 2, 0)  # (T, G, B, 2H)
    dhs = np.stack([gt[..., :H], gt[::-1, ..., H:]], axis=2)  # (T, G, 2, B, H)
    dz = np.empty_like(gates)
    dh = np.zeros((G, 2, B, H), gates.dtype)
    dc = np.zeros((G, 2, B, H), gates.dtype)
    wh_t = np.swapaxes(wh, -1, -2)
    for t in range(T - 1, -1, -1):
        a = gates[t]
        i, f, g, o = a[..., :H], a[..., H : 2 * H], a[..., 2 * H : 3 * H], a[..., 3 * H :]
        tc = tanh_c[t]
        dh = dh + dhs[t]
        dc = dc + dh * o * (1.0 - tc * tc)
        d = dz[t]
        d[..., :H] = dc * g * i * (1.0 - i)
        d[..., H : 2 * H] = dc * c_prev[t] * f * (1.0 - f)
        d[..., 2 * H : 3 * H] = dc * i * (1.0 - g * g)
        d[..., 3 * H :] = dh * tc * o * (1.0 - o)
        dc = dc * f
        dh = np.matmul(d, wh_t)
    dwx = _outer(xd, dz)
    dwh = _outer(h_prev, dz)
    db = dz.sum(axis=(0, 3))
    dxd = _project(dz, np.swapaxes(wx, -1, -2))
    dx = dxd[:, :, 0] + dxd[::-1, :, 1]  # (T, G, B, I)
    return np.moveaxis(dx, 0, 2), dwx, dwh, db


def bilstm(x, layers, hidden, params=None, rng=None):
    """Functional BiLSTM over a ``(time, in)`` or ``(batch, time, in)`` array.

    ``params`` maps ``l{k}/w_in``, ``l{k}/w_hid``, ``l{k}/bias`` to arrays
    shaped as in :class:`BiLSTM` with a leading group axis of 1.
    """
    block = BiLSTM(x.shape[-1], hidden, layers, rng=rng, dtype=x.dtype)
    if params is not None:
        for name, p in block.named_params():
            p.value = np.asarray(params[name], dtype=x.dtype).reshape(p.shape)
    return block.forward(x)


def bilstm_param_count(in_features, hidden, layers):
    total = 0
    for layer in range(layers):
        n_in = in_features if layer == 0 else 2 * hidden
        total += 2 * (4 * hidden * (n_in + hidden) + 4 * hidden)
    return total


# ---------------------------------------------------------------------------
# Sequential composition and finite-difference checking
# ---------------------------------------------------------------------------


class Sequential(Module):
    def __init__(self, *modules):
        super().__init__()
        self.layers = list(modules)
        for k, m in enumerate(modules):
            self.add_child(str(k), m)

    def forward(self, x):
        for m in self.layers:
            x = m.forward(x)
        return x

    def backward(self, grad):
        for m in reversed(self.layers):
            grad = m.backward(grad)
        return grad


def _relative_errors(analytic, numeric, scale):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-3 * scale)
    return np.abs(analytic - numeric) / denom


def grad_check(block, x, eps: float = 1e-5, seed: int = 0, check_input: bool = True) -> float:
    """Largest relative error between ``block.backward`` and central differences.

    The scalar probed is ``sum(R * block.forward(x))`` for a fixed random
    ``R``.  Every parameter entry and (optionally) every input entry is
    perturbed.  Entries whose gradient is tiny compared to the largest one
    (across all parameters and the input) are measured against 1e-3 of that
    scale rather than against themselves.
    """
    x = np.array(x, dtype=np.float64)
    y = block.forward(x)
    r = np.random.default_rng(seed).standard_normal(y.shape)

    def objective():
        return float(np.sum(r * block.forward(x)))

    if hasattr(block, "zero_grad"):
        block.zero_grad()
    block.forward(x)
    grad_x = block.backward(r)
    params = list(block.named_params()) if hasattr(block, "named_params") else []
    analytic = [p.grad.copy() for _, p in params]
    numeric = [_numeric_grad(objective, p.value, eps) for _, p in params]
    if check_input:
        analytic.append(grad_x)
        numeric.append(_numeric_grad(objective, x, eps))
    scale = max(max(np.max(np.abs(a)), np.max(np.abs(n))) for a, n in zip(analytic, numeric))
    scale = max(scale, 1e-12)
    return max(float(np.max(_relative_errors(a, n, scale))) for a, n in zip(analytic, numeric))


def _numeric_grad(f: Callable[[], float], arr: np.ndarray, eps: float) -> np.ndarray:
    out = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    view = out.reshape(-1)
    for k in range(flat.size):
        old = flat[k]
        flat[k] = old + eps
        up = f()
        flat[k] = old - eps
        down = f()
        flat[k] = old
        view[k] = (up - down) / (2 * eps)
    return out
