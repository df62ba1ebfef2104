"""Context-aware kernel machinery: objective, fixed point, unfolded map.

This module is the plain-numpy reference against which the learnable layers
are checked.  The central identity: the gram matrix of the level-T unfolded
feature map equals T applications of the recursive kernel update started
from the base similarity, so the stacked map realizes the kernel by inner
products alone.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConvergenceError, DivergenceError, ShapeError


def _as_square(mat, name):
    m = np.asarray(mat, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ShapeError(f"{name} must be square, got {m.shape}")
    return m


@dataclass
class KernelState:
    """Base similarity S, trade-off gamma, adjacency systems, and current K."""

    S: np.ndarray
    gamma: float
    adj: list[np.ndarray]
    K: np.ndarray = field(default=None)

    def __post_init__(self):
        self.S = _as_square(self.S, "S")
        if not np.allclose(self.S, self.S.T, atol=1e-10):
            raise ValueError("S must be symmetric to 1e-10")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        self.adj = [_as_square(p, "P") for p in self.adj]
        if self.K is None:
            self.K = np.array(self.S)
        if not np.all(np.isfinite(self.K)):
            raise ValueError("K must be finite")


def objective(K, S, adj, alpha, beta) -> float:
    """Fidelity minus context agreement plus a quadratic regularizer:
    tr(-K S^T) - alpha * sum_c tr(K P_c K^T P_c^T) + beta/2 * ||K||^2."""
    K = np.asarray(K, dtype=np.float64)
    S = np.asarray(S, dtype=np.float64)
    if K.shape != S.shape:
        raise ShapeError(f"objective: K {K.shape} vs S {S.shape}")
    fid = -float(np.trace(K @ S.T))
    ctx = 0.0
    for P in adj:
        P = np.asarray(P, dtype=np.float64)
        if P.shape != K.shape:
            raise ShapeError(f"objective: P {P.shape} vs K {K.shape}")
        ctx += float(np.trace(K @ P @ K.T @ P.T))
    reg = 0.5 * beta * float((K * K).sum())
    return fid - alpha * ctx + reg


def iterate(K, S, gamma, adj) -> np.ndarray:
    """One update of the recursion K' = S + gamma * sum_c P_c K P_c^T."""
    K = np.asarray(K, dtype=np.float64)
    S = np.asarray(S, dtype=np.float64)
    out = np.array(S)
    for P in adj:
        P = np.asarray(P, dtype=np.float64)
        out += gamma * (P @ K @ P.T)
    return out


def spectral_norm(P, iters: int = 50, tol: float = 1e-10) -> float:
    """Largest singular value via power iteration on P^T P."""
    P = np.asarray(P, dtype=np.float64)
    n = P.shape[1]
    rng = np.random.default_rng(0)
    v = rng.standard_normal(n)
    v /= np.linalg.norm(v)
    prev = 0.0
    for _ in range(iters):
        w = P.T @ (P @ v)
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        v = w / norm
        if abs(norm - prev) <= tol * max(1.0, norm):
            prev = norm
            break
        prev = norm
    return float(np.sqrt(prev))


def spectral_bound(gamma, adj) -> float:
    """gamma * sum_c ||P_c||_2^2, a sufficient contraction factor for the
    recursive update in Frobenius norm."""
    return float(gamma) * sum(spectral_norm(P) ** 2 for P in adj)


def default_gamma(adj, safety: float = 0.9) -> float:
    """gamma making the contraction hold by construction:
    safety / (C * max_c ||P_c||_2^2)."""
    worst = max(spectral_norm(P) ** 2 for P in adj)
    return safety / (len(adj) * worst)


@dataclass
class SolveResult:
    K: np.ndarray
    residuals: list[float]          # Frobenius residuals per step
    final_residual_inf: float
    bound: float
    iterations: int

    def residual_ratios(self):
        r = self.residuals
        return [r[i + 1] / r[i] for i in range(len(r) - 1) if r[i] > 1e-300]


def solve(S, gamma, adj, tol: float = 1e-10, max_iter: int = 1000) -> SolveResult:
    """Fixed point of ``iterate`` starting from K = S.

    Raises DivergenceError when the spectral bound is >= 1 and
    ConvergenceError (carrying the last residual) when max_iter is hit.
    """
    bound = spectral_bound(gamma, adj)
    if bound >= 1.0:
        raise DivergenceError(
            f"divergence: spectral bound {bound:.6f} >= 1 for gamma={gamma}")
    K = np.asarray(S, dtype=np.float64)
    residuals = []
    for step in range(1, max_iter + 1):
        nxt = iterate(K, S, gamma, adj)
        diff = nxt - K
        res_inf = float(np.abs(diff).max())
        residuals.append(float(np.linalg.norm(diff)))
        K = nxt
        if res_inf <= tol:
            return SolveResult(K, residuals, res_inf, bound, step)
    raise ConvergenceError(
        f"no convergence after {max_iter} iterations (residual {residuals[-1]:.3e})",
        residual=residuals[-1])


@dataclass
class UnfoldedMap:
    """Explicit feature maps per level; level 0 is the base map."""

    levels: list[np.ndarray]
    base_dim: int

    @property
    def depth(self):
        return len(self.levels) - 1

    def top(self):
        return self.levels[-1]


def unfold(phi0, gamma, adj, T: int) -> UnfoldedMap:
    """Stack the base map over scaled adjacency-mixed copies, T times.

    Level t+1 is the row-stack of phi0 and sqrt(gamma) * (level_t P_c^T)
    for each system c, so dims follow d_{t+1} = d0 + C * d_t.
    """
    if T < 0:
        raise ValueError("T must be >= 0")
    phi0 = np.asarray(phi0, dtype=np.float64)
    if phi0.ndim != 2:
        raise ShapeError("phi0 must be d0 x n")
    root = np.sqrt(gamma)
    levels = [phi0]
    for _ in range(T):
        prev = levels[-1]
        blocks = [phi0] + [root * (prev @ np.asarray(P).T) for P in adj]
        levels.append(np.concatenate(blocks, axis=0))
    return UnfoldedMap(levels, phi0.shape[0])


def gram(phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=np.float64)
    return phi.T @ phi


def normalize_columns(phi0) -> np.ndarray:
    """l2-normalize columns; zero columns stay zero.  The default base map,
    whose gram is then a normalized linear similarity."""
    phi0 = np.asarray(phi0, dtype=np.float64)
    norms = np.linalg.norm(phi0, axis=0, keepdims=True)
    return np.divide(phi0, norms, out=np.zeros_like(phi0), where=norms > 0)


def image_feature(phi_level) -> np.ndarray:
    """Aggregate a cell-wise map into one image vector (column sum)."""
    return np.asarray(phi_level, dtype=np.float64).sum(axis=1)


def image_kernel(phi_p, phi_q) -> float:
    """Similarity of two images as the inner product of their aggregated
    cell maps; equals the double sum of cell-pair kernel values."""
    p = np.asarray(phi_p, dtype=np.float64)
    q = np.asarray(phi_q, dtype=np.float64)
    if p.shape[0] != q.shape[0]:
        raise ShapeError(f"image_kernel: dims {p.shape[0]} != {q.shape[0]}")
    return float(image_feature(p) @ image_feature(q))
