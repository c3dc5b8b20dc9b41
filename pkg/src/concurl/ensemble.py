"""Fixed random transformations of the embedding space and the consensus loss."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np

from .nn import DegenerateEmbeddingError, normalize_rows
from .softclust import soft_assign

PROB_FLOOR = 1e-30
LOG_FLOOR = float(np.log(PROB_FLOOR))

KINDS = ("gaussian_projection", "diagonal", "mixed")


@dataclass
class TransformEnsemble:
    """M fixed linear maps; each matrix maps d -> d_out and acts as ``z~ = A z``."""

    matrices: List[np.ndarray] = field(default_factory=list)
    kinds: List[str] = field(default_factory=list)
    seed: int = 0

    def __len__(self) -> int:
        return len(self.matrices)

    def to_arrays(self) -> dict:
        return {f"ens.{m}": A for m, A in enumerate(self.matrices)}

    def tobytes(self) -> bytes:
        return b"".join(A.tobytes() for A in self.matrices) + ",".join(self.kinds).encode()


def _gaussian_projection(rng, d, d_out):
    # Entries N(0, 1/d_out): E|Az|^2 = |z|^2.
    for _ in range(100):
        A = rng.normal(scale=1.0 / np.sqrt(d_out), size=(d_out, d))
        if np.linalg.matrix_rank(A) == min(d, d_out):
            return A
    raise RuntimeError("could not draw a full-rank projection")


def _diagonal(rng, d):
    return np.diag(np.exp(rng.uniform(np.log(0.1), np.log(10.0), size=d)))


def init_ensemble(m: int, kind: str, d: int, d_out: int, rng) -> TransformEnsemble:
    """Draw ``m`` transforms once. ``mixed`` alternates projection, diagonal, projection, ..."""
    if kind not in KINDS:
        raise ValueError(f"unknown ensemble kind {kind!r}; expected one of {KINDS}")
    if m < 0 or d < 2:
        raise ValueError("need m >= 0 and d >= 2")
    if kind != "diagonal" and m > 0 and d_out < 2:
        raise ValueError("projection dimension must be >= 2")
    seed = int(rng) if isinstance(rng, (int, np.integer)) else 0
    rng = np.random.default_rng(rng)
    mats, kinds = [], []
    for i in range(m):
        k = kind if kind != "mixed" else ("gaussian_projection" if i % 2 == 0 else "diagonal")
        mats.append(_gaussian_projection(rng, d, d_out) if k == "gaussian_projection" else _diagonal(rng, d))
        kinds.append(k)
    return TransformEnsemble(mats, kinds, seed)


def apply_transform(A: np.ndarray, Z: np.ndarray, C: np.ndarray, index: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """Return (normalized rows of Z A^T, normalized columns of A C)."""
    try:
        z_unit, _ = normalize_rows(Z @ A.T)
        c_unit, _ = normalize_rows((A @ C).T)
    except DegenerateEmbeddingError as e:
        raise DegenerateEmbeddingError(f"transform {index}: {e}") from None
    return z_unit, c_unit.T


def _ce_grad(log_P: np.ndarray, P: np.ndarray, target: np.ndarray, scale: float):
    """Loss  -scale * sum q log max(p, floor)  and its gradient w.r.t. the logits."""
    live = log_P > LOG_FLOOR
    w = np.where(live, target, 0.0)
    loss = -scale * float((target * np.maximum(log_P, LOG_FLOOR)).sum())
    grad = scale * (P * w.sum(1, keepdims=True) - w)
    return loss, grad


@dataclass
class ConsensusResult:
    loss: float
    grad_Z1: np.ndarray | None
    grad_Z2: np.ndarray | None
    grad_C: np.ndarray | None
    per_transform: List[float]


def consensus_loss(ens: TransformEnsemble, Z1: np.ndarray, Z2: np.ndarray, C: np.ndarray,
                   q1: np.ndarray, q2: np.ndarray, tau: float = 0.1,
                   with_grad: bool = True) -> ConsensusResult:
    """Swapped-prediction cross-entropy summed over every transform of the ensemble.

    View 1 predictions are scored against the view-2 codes and vice versa,
    each scaled by 1/(2B). Codes are constants. Per-transform terms are summed
    in index order so the reduction is reproducible.
    """
    C = C.C if hasattr(C, "C") else C
    B = Z1.shape[0]
    scale = 1.0 / (2 * B)
    total = 0.0
    per = []
    gZ1 = np.zeros_like(Z1) if with_grad else None
    gZ2 = np.zeros_like(Z2) if with_grad else None
    gC = np.zeros_like(C) if with_grad else None
    for m, A in enumerate(ens.matrices):
        AC = A @ C
        try:
            s1 = soft_assign(Z1 @ A.T, AC, tau)
            s2 = soft_assign(Z2 @ A.T, AC, tau)
        except DegenerateEmbeddingError as e:
            raise DegenerateEmbeddingError(f"transform {m}: {e}") from None
        l1, g1 = _ce_grad(s1.log_P, s1.P, q2, scale)
        l2, g2 = _ce_grad(s2.log_P, s2.P, q1, scale)
        per.append(l1 + l2)
        total += l1 + l2
        if with_grad:
            dz1, dc1 = s1.backward(g1)
            dz2, dc2 = s2.backward(g2)
            gZ1 += dz1 @ A
            gZ2 += dz2 @ A
            gC += A.T @ (dc1 + dc2)
    return ConsensusResult(total, gZ1, gZ2, gC, per)


def swapped_prediction_loss(Z1, Z2, C, q1, q2, tau=0.1) -> float:
    """Untransformed swapped-prediction loss; used as a reference in tests."""
    P1 = soft_assign(Z1, C, tau).P
    P2 = soft_assign(Z2, C, tau).P
    B = Z1.shape[0]
    return float(-(q2 * np.log(P1)).sum() / (2 * B) - (q1 * np.log(P2)).sum() / (2 * B))
