"""Minimal fully-connected network with hand-written backprop and Adam.

Deliberately tiny: the denoiser only needs a few dense ReLU layers, and a
self-contained numpy implementation keeps training deterministic and
dependency-free.
"""

from __future__ import annotations

import numpy as np


class Mlp:
    """Dense ReLU network, linear output layer."""

    def __init__(self, sizes, rng: np.random.Generator) -> None:
        if len(sizes) < 2:
            raise ValueError("need at least input and output sizes")
        self.sizes = list(sizes)
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            scale = np.sqrt(2.0 / fan_in)
            self.weights.append(rng.standard_normal((fan_in, fan_out)) * scale)
            self.biases.append(np.zeros(fan_out))

    def forward(self, x: np.ndarray):
        """Returns (output, cache) where cache holds pre-ReLU activations."""
        acts = [x]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = acts[-1] @ w + b
            if i < len(self.weights) - 1:
                z = np.maximum(z, 0.0)
            acts.append(z)
        return acts[-1], acts

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, acts, dout: np.ndarray):
        """Gradients of all weights/biases given d(loss)/d(output)."""
        dw = [None] * len(self.weights)
        db = [None] * len(self.biases)
        delta = dout
        for i in range(len(self.weights) - 1, -1, -1):
            dw[i] = acts[i].T @ delta
            db[i] = delta.sum(axis=0)
            if i > 0:
                delta = (delta @ self.weights[i].T) * (acts[i] > 0.0)
        return dw, db

    def parameters(self):
        return self.weights + self.biases

    def set_parameters(self, params) -> None:
        n = len(self.weights)
        self.weights = [np.asarray(p, dtype=float) for p in params[:n]]
        self.biases = [np.asarray(p, dtype=float) for p in params[n:]]


class Adam:
    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8) -> None:
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def update(self, params, grads) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


def sinusoidal_embedding(k, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Transformer-style step embedding for integer step indices (..., )."""
    k = np.asarray(k, dtype=float)
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / half)
    args = k[..., None] * freqs
    return np.concatenate([np.sin(args), np.cos(args)], axis=-1)
