"""Parameterized layers built on the tensor engine.

Layers expose their weights through ``parameters()`` as an ordered
name -> Tensor mapping so the optimizer and checkpoints see a stable,
deterministic ordering.
"""

import math
import numpy as np

from . import tensor as T
from .tensor import Tensor


def glorot(rng, fan_in, fan_out, shape=None):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    shape = shape if shape is not None else (fan_in, fan_out)
    return Tensor(rng.uniform(-limit, limit, size=shape), requires_grad=True)


def zeros(shape):
    return Tensor(np.zeros(shape), requires_grad=True)


def silu(x):
    return T.mul(x, T.sigmoid(x))


class Linear:
    def __init__(self, d_in, d_out, rng, zero_init=False):
        self.w = zeros((d_in, d_out)) if zero_init else glorot(rng, d_in, d_out)
        self.b = zeros((d_out,))

    def __call__(self, x):
        return T.add(T.matmul(x, self.w), self.b)

    def parameters(self):
        return {"w": self.w, "b": self.b}


class LayerNorm:
    def __init__(self, d, eps=1e-5):
        self.gamma = Tensor(np.ones(d), requires_grad=True)
        self.beta = zeros((d,))
        self.eps = eps

    def __call__(self, x):
        return T.layer_norm(x, self.gamma, self.beta, self.eps)

    def parameters(self):
        return {"gamma": self.gamma, "beta": self.beta}


class MultiHeadAttention:
    def __init__(self, d_model, heads, rng):
        from .errors import ConfigError

        if d_model % heads != 0:
            raise ConfigError(f"model dim {d_model} not divisible by {heads} heads")
        self.heads = heads
        self.wq = glorot(rng, d_model, d_model)
        self.bq = zeros((d_model,))
        self.wk = glorot(rng, d_model, d_model)
        self.bk = zeros((d_model,))
        self.wv = glorot(rng, d_model, d_model)
        self.bv = zeros((d_model,))
        self.wo = glorot(rng, d_model, d_model)
        self.bo = zeros((d_model,))

    def __call__(self, q, k, v, return_weights=False):
        out, weights = T.multi_head_attention(
            q, k, v, self.heads,
            self.wq, self.bq, self.wk, self.bk, self.wv, self.bv, self.wo, self.bo,
        )
        return (out, weights) if return_weights else out

    def parameters(self):
        return {
            "wq": self.wq, "bq": self.bq,
            "wk": self.wk, "bk": self.bk,
            "wv": self.wv, "bv": self.bv,
            "wo": self.wo, "bo": self.bo,
        }


class FeedForward:
    def __init__(self, d_model, d_hidden, rng):
        self.fc1 = Linear(d_model, d_hidden, rng)
        self.fc2 = Linear(d_hidden, d_model, rng)

    def __call__(self, x):
        return self.fc2(silu(self.fc1(x)))

    def parameters(self):
        return prefixed({"fc1": self.fc1, "fc2": self.fc2})


class Mlp:
    """Stack of Linear layers with silu between them (none after the last)."""

    def __init__(self, dims, rng, zero_init_last=False):
        self.layers = [
            Linear(dims[i], dims[i + 1], rng, zero_init=zero_init_last and i == len(dims) - 2)
            for i in range(len(dims) - 1)
        ]

    def __call__(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i + 1 < len(self.layers):
                x = silu(x)
        return x

    def parameters(self):
        return prefixed({f"l{i}": layer for i, layer in enumerate(self.layers)})


def prefixed(children):
    """Flatten child parameters()/Tensor attributes into one namespaced dict."""
    out = {}
    for name, child in children.items():
        if isinstance(child, Tensor):
            out[name] = child
        else:
            for sub, t in child.parameters().items():
                out[f"{name}.{sub}"] = t
    return out
