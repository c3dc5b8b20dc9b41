"""Small ReLU MLPs with hand-written backward passes, row L2-normalization and SGD.

Parameters live in plain ``dict[str, ndarray]`` blocks so the optimizer,
checkpointing and gradient checks all address them by name.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Sequence, Tuple

import numpy as np

TINY_NORM = 1e-12
BN_EPS = 1e-5

Params = Dict[str, np.ndarray]


class DegenerateEmbeddingError(ArithmeticError):
    """A vector that must be normalized has (near-)zero norm."""


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class MLP:
    """Affine layers with ReLU between them (none after the last layer).

    ``standardize`` optionally batch-standardizes every hidden pre-activation
    (batch norm without the affine part) before the ReLU.
    """

    prefix: str
    sizes: Tuple[int, ...]
    params: Params = field(repr=False)
    standardize: bool = False

    @classmethod
    def init(cls, prefix: str, sizes: Sequence[int], rng: np.random.Generator,
             standardize: bool = False) -> "MLP":
        sizes = tuple(int(s) for s in sizes)
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError(f"bad layer sizes {sizes}")
        params = {}
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            params[f"{prefix}.{i}.W"] = rng.normal(scale=1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))
            params[f"{prefix}.{i}.b"] = np.zeros(fan_out)
        return cls(prefix, sizes, params, standardize)

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    def W(self, i):
        return self.params[f"{self.prefix}.{i}.W"]

    def b(self, i):
        return self.params[f"{self.prefix}.{i}.b"]

    def forward(self, x: np.ndarray):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.sizes[0]:
            raise ValueError(f"{self.prefix}: expected (B, {self.sizes[0]}) input, got {x.shape}")
        cache = []
        h = x
        for i in range(self.n_layers):
            a = h @ self.W(i) + self.b(i)
            entry = {"in": h}
            if i < self.n_layers - 1:
                if self.standardize:
                    mu = a.mean(0)
                    inv_sd = 1.0 / np.sqrt(a.var(0) + BN_EPS)
                    a = (a - mu) * inv_sd
                    entry["bn"] = (a, inv_sd)
                entry["mask"] = a > 0
                h = np.where(entry["mask"], a, 0.0)
            else:
                h = a
            cache.append(entry)
        return h, cache

    def backward(self, grad_out: np.ndarray, cache) -> Tuple[np.ndarray, Params]:
        """Returns (gradient w.r.t. the input, gradients per parameter name)."""
        if len(cache) != self.n_layers or grad_out.shape != (cache[0]["in"].shape[0], self.sizes[-1]):
            raise ValueError(f"{self.prefix}: gradient/cache shape mismatch")
        grads = {}
        g = grad_out
        for i in reversed(range(self.n_layers)):
            entry = cache[i]
            if i < self.n_layers - 1:
                g = np.where(entry["mask"], g, 0.0)
                if "bn" in entry:
                    y, inv_sd = entry["bn"]
                    g = inv_sd * (g - g.mean(0) - y * (g * y).mean(0))
            grads[f"{self.prefix}.{i}.W"] = entry["in"].T @ g
            grads[f"{self.prefix}.{i}.b"] = g.sum(0)
            g = g @ self.W(i).T
        return g, grads


def init_encoder(in_dim: int, hidden: Sequence[int], feat_dim: int, rng) -> MLP:
    return MLP.init("enc", [in_dim, *hidden, feat_dim], rng)


def init_head(feat_dim: int, hidden: int, embed_dim: int, rng, standardize: bool = False) -> MLP:
    return MLP.init("head", [feat_dim, hidden, embed_dim], rng, standardize=standardize)


def encoder_forward(enc: MLP, x_batch):
    return enc.forward(x_batch)


def head_forward(head: MLP, feat):
    return head.forward(feat)


def l2_normalize(v: np.ndarray, axis: int = -1) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    norms = np.linalg.norm(v, axis=axis, keepdims=True)
    if np.any(norms <= TINY_NORM):
        raise DegenerateEmbeddingError("cannot normalize a vector with near-zero norm")
    return v / norms


def normalize_rows(v: np.ndarray):
    """Row-normalize ``v``; returns (unit rows, row norms) for the backward pass."""
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    if np.any(norms <= TINY_NORM):
        bad = int(np.argmax(norms.ravel() <= TINY_NORM))
        raise DegenerateEmbeddingError(f"row {bad} has near-zero norm")
    return v / norms, norms


def normalize_rows_backward(grad_u: np.ndarray, u: np.ndarray, norms: np.ndarray) -> np.ndarray:
    # d(v/|v|) = (I - u u^T) / |v|
    return (grad_u - u * (grad_u * u).sum(1, keepdims=True)) / norms


@dataclass
class SGD:
    """Momentum SGD with coupled weight decay: v <- mu*v + (g + wd*p); p <- p - lr*v."""

    momentum: float = 0.9
    weight_decay: float = 0.0
    velocity: Params = field(default_factory=dict)

    def __post_init__(self):
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")

    def step(self, params: Params, grads: Params, lr: float) -> None:
        """Updates ``params`` in place; blocks absent from ``grads`` are left untouched."""
        if lr < 0:
            raise ValueError("lr must be >= 0")
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient in parameter block {name!r}")
            if g.shape != params[name].shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name!r}")
        for name, g in grads.items():
            p = params[name]
            if self.weight_decay:
                g = g + self.weight_decay * p
            v = self.velocity.get(name)
            v = g.copy() if v is None else self.momentum * v + g
            self.velocity[name] = v
            p -= lr * v


def sgd_step(params: Params, grads: Params, lr: float, momentum: float = 0.0,
             weight_decay: float = 0.0, velocity: Params | None = None) -> Params:
    """Functional form of :class:`SGD`; returns updated copies and mutates ``velocity``."""
    out = {k: v.copy() for k, v in params.items()}
    opt = SGD(momentum, weight_decay, velocity if velocity is not None else {})
    opt.step(out, grads, lr)
    return out


def check_finite(name: str, value) -> None:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"non-finite value in {name}")

