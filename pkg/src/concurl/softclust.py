"""Prototype soft assignments and Sinkhorn-Knopp equipartition codes."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .nn import normalize_rows, normalize_rows_backward

CONVERGE_TOL = 1e-9
CONVERGE_MAX_ITERS = 1000


class SinkhornDegeneracyError(ArithmeticError):
    pass


@dataclass
class Prototypes:
    """Cluster prototypes stored as the columns of a d x K matrix."""

    C: np.ndarray

    def __post_init__(self):
        self.C = np.asarray(self.C, dtype=np.float64)
        if self.C.ndim != 2 or self.C.shape[1] < 2:
            raise ValueError(f"prototype matrix must be d x K with K >= 2, got {self.C.shape}")

    @property
    def K(self) -> int:
        return self.C.shape[1]

    @property
    def d(self) -> int:
        return self.C.shape[0]


def init_prototypes(k: int, d: int, rng) -> Prototypes:
    """Gaussian prototypes; ``rng`` is a Generator or an integer seed."""
    if k < 2 or d < 2:
        raise ValueError("need k >= 2 and d >= 2")
    rng = np.random.default_rng(rng)
    return Prototypes(rng.normal(size=(d, k)))


@dataclass
class SoftAssignment:
    """Forward result of the normalized-dot-product softmax, with backward cache."""

    P: np.ndarray
    log_P: np.ndarray
    z_unit: np.ndarray
    z_norm: np.ndarray
    c_unit: np.ndarray  # K x d (rows are normalized prototypes)
    c_norm: np.ndarray
    tau: float

    def backward(self, grad_logits: np.ndarray):
        """Map dL/dlogits (B x K) to (dL/dZ, dL/dC) for the *unnormalized* inputs.

        dL/dC is returned in the d x K layout of the prototype matrix.
        """
        gz = grad_logits @ self.c_unit / self.tau
        gc = grad_logits.T @ self.z_unit / self.tau
        dZ = normalize_rows_backward(gz, self.z_unit, self.z_norm)
        dC = normalize_rows_backward(gc, self.c_unit, self.c_norm)
        return dZ, dC.T


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def soft_assign(Z: np.ndarray, C: np.ndarray, tau: float) -> SoftAssignment:
    """Row i = softmax_j(<z_i/|z_i|, c_j/|c_j|> / tau) for Z (B x d), C (d x K)."""
    if not tau > 0:
        raise ValueError("tau must be positive")
    z_unit, z_norm = normalize_rows(np.asarray(Z, dtype=np.float64))
    c_unit, c_norm = normalize_rows(np.asarray(C, dtype=np.float64).T)
    log_P = log_softmax(z_unit @ c_unit.T / tau)
    return SoftAssignment(np.exp(log_P), log_P, z_unit, z_norm, c_unit, c_norm, tau)


def assignment_probabilities(Z: np.ndarray, protos: Prototypes | np.ndarray, tau: float = 0.1) -> np.ndarray:
    C = protos.C if isinstance(protos, Prototypes) else protos
    return soft_assign(Z, C, tau).P


@dataclass
class CodeMatrix:
    Q: np.ndarray  # K x B, on the transportation polytope
    n_iters: int
    newton_steps: int = 0

    @property
    def q_rows(self) -> np.ndarray:
        """Per-sample codes (B x K), each row summing to 1."""
        return self.Q.T * self.Q.shape[1]


def _newton_dual(L: np.ndarray, f: np.ndarray, g: np.ndarray, r: float, c: float, tol: float,
                 max_steps: int = 200):
    """Damped Newton on the dual  sum exp(f_i + g_j + L_ij) - r sum f - c sum g.

    Its minimizer gives the same scaling Q = exp(f + g + L) that Sinkhorn
    converges to, but quadratically; g_0 is pinned to remove the shift gauge.
    """
    K, B = L.shape

    def phi(f, g):
        return float(np.exp(f[:, None] + g[None, :] + L).sum() - r * f.sum() - c * g.sum())

    steps = 0
    for steps in range(1, max_steps + 1):
        Q = np.exp(f[:, None] + g[None, :] + L)
        rs, cs = Q.sum(1), Q.sum(0)
        if max(np.abs(rs - r).max(), np.abs(cs - c).max()) <= tol:
            break
        grad = np.concatenate([rs - r, (cs - c)[1:]])
        H = np.zeros((K + B - 1, K + B - 1))
        H[:K, :K] = np.diag(rs)
        H[K:, K:] = np.diag(cs[1:])
        H[:K, K:] = Q[:, 1:]
        H[K:, :K] = Q[:, 1:].T
        try:
            d = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            d = np.linalg.lstsq(H, grad, rcond=None)[0]
        df, dg = d[:K], np.concatenate([[0.0], d[K:]])
        base, slope, t = phi(f, g), float(grad @ d), 1.0
        while t > 1e-12 and phi(f - t * df, g - t * dg) > base - 1e-4 * t * slope:
            t *= 0.5
        f, g = f - t * df, g - t * dg
    return f, g, steps


def sinkhorn(scores: np.ndarray, epsilon: float = 0.05, n_iters: int | None = 3,
             tol: float = CONVERGE_TOL, max_iters: int = CONVERGE_MAX_ITERS) -> CodeMatrix:
    """Entropic projection of a K x B score matrix onto the equipartition polytope.

    Each round rescales rows to mass 1/K and then columns to mass 1/B, so the
    column marginal is exact on return. With ``n_iters=None`` rounds continue
    until the row-marginal residual is <= ``tol``. Sinkhorn converges only
    linearly, and very slowly when the kernel spans many orders of magnitude
    (small epsilon), so after ``max_iters`` rounds the scalings are finished
    with Newton steps on the dual, which reach the same fixed point.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    scores = np.asarray(scores, dtype=np.float64)
    K, B = scores.shape
    # Column-wise shift: a diagonal rescaling of the kernel, which Sinkhorn absorbs.
    L = (scores - scores.max(axis=0, keepdims=True)) / epsilon
    Q = np.exp(L)
    if np.any(Q.sum(axis=1) == 0):
        raise SinkhornDegeneracyError("a cluster row underflowed to zero; increase epsilon")
    total = Q.sum()
    Q /= total
    L -= np.log(total)
    r, c = 1.0 / K, 1.0 / B
    f, g = np.zeros(K), np.zeros(B)  # log scalings: Q = exp(f_i + g_j + L_ij)
    limit = max_iters if n_iters is None else n_iters
    it = 0
    while it < limit:
        a = r / Q.sum(axis=1, keepdims=True)
        Q *= a
        b = c / Q.sum(axis=0, keepdims=True)
        Q *= b
        f += np.log(a.ravel())
        g += np.log(b.ravel())
        it += 1
        if n_iters is None and np.abs(Q.sum(axis=1) - r).max() <= tol:
            break
    newton = 0
    if n_iters is None and np.abs(Q.sum(axis=1) - r).max() > tol:
        f, g, newton = _newton_dual(L, f, g, r, c, tol * 1e-3)
        Q = np.exp(f[:, None] + g[None, :] + L)
        Q *= c / Q.sum(axis=0, keepdims=True)
    if not np.all(np.isfinite(Q)):
        raise SinkhornDegeneracyError("non-finite entries in Sinkhorn codes")
    return CodeMatrix(Q, it, newton)


def sinkhorn_codes(Z: np.ndarray, protos: Prototypes | np.ndarray, epsilon: float = 0.05,
                   n_iters: int | None = 3) -> CodeMatrix:
    """Codes for a batch of embeddings against prototypes; no gradient is tracked."""
    C = protos.C if isinstance(protos, Prototypes) else protos
    z_unit, _ = normalize_rows(np.asarray(Z, dtype=np.float64))
    c_unit, _ = normalize_rows(np.asarray(C, dtype=np.float64).T)
    K, B = c_unit.shape[0], z_unit.shape[0]
    if B < K:
        warnings.warn(f"batch size {B} smaller than cluster count {K}; equipartition is very coarse",
                      stacklevel=2)
    return sinkhorn(c_unit @ z_unit.T, epsilon, n_iters)


def transport_objective(Q: np.ndarray, scores: np.ndarray, epsilon: float) -> float:
    """Tr(Q^T S) + eps * H(Q) with H(Q) = -sum Q log Q (0 log 0 = 0)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = -np.where(Q > 0, Q * np.log(Q), 0.0).sum()
    return float((Q * scores).sum() + epsilon * ent)
