"""A small MLP velocity field ``s(x, t, d)`` with hand-written backprop, Adam and EMA."""

import json
from dataclasses import dataclass

import numpy as np

from .distributions import standard_normal
from .exceptions import NumericalAbort


def fourier_features(s, n_features):
    """``[sin(k pi s), cos(k pi s)]`` for k = 1..n_features, shape (n, 2 * n_features)."""
    freqs = np.pi * np.arange(1, n_features + 1)
    arg = np.asarray(s, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def silu(z):
    return z * _sigmoid(z)


def silu_grad(z, sig=None):
    s = _sigmoid(z) if sig is None else sig
    return s * (1.0 + z * (1.0 - s))


class VectorFieldNet:
    """Fully connected field over ``[x, fourier(t), fourier(d)]`` with SiLU hidden units.

    All parameters live in one flat float64 vector ``params``; ``layers`` returns
    (W, b) views into it. The output layer starts at zero so the initial field is 0.
    """

    def __init__(self, dim=2, hidden_width=128, hidden_layers=3, n_features=8, rng=None):
        if min(dim, hidden_width, n_features) < 1 or hidden_layers < 0:
            raise ValueError("network sizes must be positive")
        self.dim = int(dim)
        self.hidden_width = int(hidden_width)
        self.hidden_layers = int(hidden_layers)
        self.n_features = int(n_features)
        widths = [self.input_dim] + [self.hidden_width] * self.hidden_layers + [self.dim]
        self.shapes = list(zip(widths[:-1], widths[1:]))
        self.n_params = sum(a * b + b for a, b in self.shapes)
        self.params = np.zeros(self.n_params)
        self._cache = None
        rng = np.random.default_rng(0) if rng is None else rng
        for W, _ in self.layers()[:-1]:
            W[...] = standard_normal(rng, W.shape) / np.sqrt(W.shape[0])

    @property
    def input_dim(self):
        return self.dim + 4 * self.n_features

    def layers(self, params=None):
        params = self.params if params is None else params
        if params.shape != (self.n_params,):
            raise ValueError(f"parameter vector has shape {params.shape}, expected ({self.n_params},)")
        out, pos = [], 0
        for fan_in, fan_out in self.shapes:
            W = params[pos:pos + fan_in * fan_out].reshape(fan_in, fan_out)
            pos += fan_in * fan_out
            b = params[pos:pos + fan_out]
            pos += fan_out
            out.append((W, b))
        return out

    def embed(self, x, t, d):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ValueError(f"expected input of shape (n, {self.dim}), got {x.shape}")
        n = x.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
        d = np.broadcast_to(np.asarray(d, dtype=np.float64), (n,))
        return np.concatenate(
            [x, fourier_features(t, self.n_features), fourier_features(d, self.n_features)], axis=1
        )

    def __call__(self, x, t, d=0.0, params=None):
        """Evaluate the field without caching anything (use for EMA or sampling)."""
        h = self.embed(x, t, d)
        layers = self.layers(params)
        for W, b in layers[:-1]:
            h = silu(h @ W + b)
        W, b = layers[-1]
        return h @ W + b

    def forward(self, x, t, d=0.0):
        """Evaluate with the live parameters and cache activations for :meth:`backward`."""
        h = self.embed(x, t, d)
        inputs, pre = [h], []
        layers = self.layers()
        for W, b in layers[:-1]:
            z = h @ W + b
            sig = _sigmoid(z)
            pre.append((z, sig))
            h = z * sig
            inputs.append(h)
        W, b = layers[-1]
        self._cache = (inputs, pre)
        return h @ W + b

    def backward(self, grad_out):
        """Gradient of a scalar loss w.r.t. ``params`` given dLoss/dOutput of the last forward."""
        if self._cache is None:
            raise RuntimeError("backward() called without a cached forward pass")
        inputs, pre = self._cache
        self._cache = None
        grad_out = np.asarray(grad_out, dtype=np.float64)
        if grad_out.shape != (inputs[0].shape[0], self.dim):
            raise ValueError(f"output gradient has shape {grad_out.shape}")
        grads = np.zeros(self.n_params)
        layer_grads = self.layers(grads)
        layers = self.layers()
        delta = grad_out
        for i in range(len(layers) - 1, -1, -1):
            gW, gb = layer_grads[i]
            gW[...] = inputs[i].T @ delta
            gb[...] = delta.sum(axis=0)
            if i > 0:
                delta = (delta @ layers[i][0].T) * silu_grad(*pre[i - 1])
        return grads


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params, **kwargs):
        return cls(np.zeros_like(params), np.zeros_like(params), **kwargs)


def adam_step(params, grads, state):
    """Bias-corrected Adam update of ``params`` in place."""
    if not np.all(np.isfinite(grads)):
        bad = np.flatnonzero(~np.isfinite(grads))
        raise NumericalAbort(
            f"non-finite gradient in {bad.size} coordinates (first: {bad[0]})",
            {"grads": grads.copy()},
        )
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1.0 - b1) * grads
    state.v *= b2
    state.v += (1.0 - b2) * grads * grads
    m_hat = state.m / (1.0 - b1 ** state.step)
    v_hat = state.v / (1.0 - b2 ** state.step)
    params -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params, state


@dataclass
class EmaParams:
    shadow: np.ndarray
    decay: float = 0.999

    def __post_init__(self):
        if not 0.0 <= self.decay < 1.0:
            raise ValueError(f"EMA decay must be in [0, 1), got {self.decay}")

    @classmethod
    def from_params(cls, params, decay=0.999):
        return cls(np.array(params, dtype=np.float64, copy=True), decay)

    def update(self, live):
        if live.shape != self.shadow.shape:
            raise ValueError("EMA shadow and live parameters differ in shape")
        self.shadow *= self.decay
        self.shadow += (1.0 - self.decay) * live
        return self


# Checkpoint layout:
#   line 1   b"MACFLOW-CKPT 1\n"
#   line 2   UTF-8 JSON header + b"\n": {"arrays": [{"name", "shape"}, ...], "meta": {...}}
#   body     each array, in header order, as row-major little-endian float64
_MAGIC = b"MACFLOW-CKPT 1\n"


def save_arrays(path, arrays, meta=None):
    header = {
        "arrays": [{"name": k, "shape": list(np.shape(v))} for k, v in arrays.items()],
        "meta": meta or {},
    }
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for value in arrays.values():
            fh.write(np.ascontiguousarray(value, dtype="<f8").tobytes())


def load_arrays(path):
    with open(path, "rb") as fh:
        if fh.readline() != _MAGIC:
            raise ValueError(f"{path}: not a macflow checkpoint")
        header = json.loads(fh.readline().decode("utf-8"))
        arrays = {}
        for spec in header["arrays"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(8 * count)
            if len(raw) != 8 * count:
                raise ValueError(f"{path}: truncated array {spec['name']!r}")
            arrays[spec["name"]] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
        if fh.read(1):
            raise ValueError(f"{path}: trailing bytes after last array")
    return arrays, header["meta"]
