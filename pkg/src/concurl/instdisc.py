"""Instance discrimination against a memory bank, scored with an NCE objective.

The softmax over bank rows uses the exact partition function rather than a
running estimate of the normalization constant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import normalize_rows


@dataclass
class MemoryBank:
    bank: np.ndarray  # N x feat_dim, unit rows
    momentum: float = 0.5
    tau_id: float = 0.5
    m_noise: int = 4096

    def __post_init__(self):
        if not 0 <= self.momentum <= 1:
            raise ValueError("momentum must be in [0, 1]")
        if not self.tau_id > 0:
            raise ValueError("tau_id must be positive")
        if not 1 <= self.m_noise < self.n:
            raise ValueError(f"m_noise must be in [1, N-1] = [1, {self.n - 1}], got {self.m_noise}")

    @property
    def n(self) -> int:
        return self.bank.shape[0]

    @classmethod
    def random(cls, n: int, feat_dim: int, rng, momentum=0.5, tau_id=0.5, m_noise=None) -> "MemoryBank":
        rows, _ = normalize_rows(np.random.default_rng(rng).normal(size=(n, feat_dim)))
        m = min(4096, n - 1) if m_noise is None else m_noise
        return cls(rows, momentum, tau_id, m)


def id_probabilities(bank: MemoryBank, f_unit: np.ndarray) -> np.ndarray:
    """P(i | f) for every bank row i; ``f_unit`` is (feat_dim,) or (B, feat_dim)."""
    logits = np.atleast_2d(f_unit) @ bank.bank.T / bank.tau_id
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    P = e / e.sum(axis=1, keepdims=True)
    return P[0] if np.ndim(f_unit) == 1 else P


def id_probability(bank: MemoryBank, f_unit: np.ndarray, i: int) -> float:
    if not 0 <= i < bank.n:
        raise IndexError(f"id {i} out of range for a bank of {bank.n} rows")
    return float(id_probabilities(bank, f_unit)[i])


def draw_noise_ids(ids: np.ndarray, n: int, m: int, rng: np.random.Generator) -> np.ndarray:
    """m ids per sample, uniform over the other n-1 ids, with replacement."""
    draws = rng.integers(0, n - 1, size=(len(ids), m))
    return draws + (draws >= np.asarray(ids)[:, None])


@dataclass
class NCEResult:
    loss: float
    grad_feats: np.ndarray | None
    data_terms: np.ndarray  # per sample, -log h(i, f)
    noise_terms: np.ndarray  # per sample and noise draw, -log(1 - h(j, f))


def nce_loss(bank: MemoryBank, f_unit: np.ndarray, ids: np.ndarray, rng: np.random.Generator | None = None,
             noise_ids: np.ndarray | None = None, with_grad: bool = True) -> NCEResult:
    """Batch-mean NCE loss and its gradient w.r.t. the unit features.

    h(j, f) = P(j|f) / (P(j|f) + m/N). Each sample contributes
    -log h(own id) - sum over m noise ids of log(1 - h(noise id)).
    """
    ids = np.asarray(ids)
    if ids.min() < 0 or ids.max() >= bank.n:
        raise IndexError("id out of range")
    if bank.m_noise >= bank.n:
        raise ValueError("m_noise must be < N")
    B = len(ids)
    if noise_ids is None:
        noise_ids = draw_noise_ids(ids, bank.n, bank.m_noise, rng)
    P = id_probabilities(bank, f_unit)
    c = bank.m_noise / bank.n
    rows = np.arange(B)[:, None]
    p_pos = P[np.arange(B), ids]
    p_neg = P[rows, noise_ids]
    h_pos = p_pos / (p_pos + c)
    h_neg = p_neg / (p_neg + c)
    data_terms = -np.log(h_pos)
    noise_terms = np.log1p(p_neg / c)  # -log(1 - h) = log((p + c) / c)
    loss = float((data_terms.sum() + noise_terms.sum()) / B)

    grad = None
    if with_grad:
        # d log P_j / d f = (bank_j - sum_k P_k bank_k) / tau
        # d(-log h_pos)/d log P = -(1 - h_pos);  d(-log(1 - h_neg))/d log P = h_neg
        coef = np.zeros_like(P)
        np.add.at(coef, (np.arange(B), ids), -(1 - h_pos))
        np.add.at(coef, (np.broadcast_to(rows, noise_ids.shape), noise_ids), h_neg)
        W = coef - P * coef.sum(axis=1, keepdims=True)
        grad = (W @ bank.bank) / (bank.tau_id * B)
    return NCEResult(loss, grad, data_terms, noise_terms)


def bank_update(bank: MemoryBank, f_unit: np.ndarray, ids: np.ndarray, momentum: float | None = None) -> None:
    """row_i <- normalize(momentum * row_i + (1 - momentum) * f_i), in place."""
    mom = bank.momentum if momentum is None else momentum
    mixed = mom * bank.bank[ids] + (1 - mom) * np.asarray(f_unit)
    bank.bank[ids], _ = normalize_rows(mixed)
