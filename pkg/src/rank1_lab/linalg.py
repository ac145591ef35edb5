"""Dense real linear algebra: SVD, norms and the angle/similarity metrics.

Every routine here works in float64 and treats its inputs as immutable.
The SVD is a one-sided (Hestenes) Jacobi method with a round-robin pair
ordering, so a whole round of disjoint column rotations is applied as one
vectorised numpy update.
"""
from __future__ import annotations

import functools

import math
from typing import NamedTuple

import numpy as np

from .errors import (
    AllZero,
    DegenerateMatrix,
    LinalgError,
    NonConvergence,
    NonFiniteInput,
    ShapeMismatch,
    ZeroNorm,
)

SVD_TOL = 1e-10
MAX_SWEEPS = 100
DEGENERATE_RTOL = 1e-12


class SvdResult(NamedTuple):
    u: np.ndarray  # (m, k), orthonormal columns
    s: np.ndarray  # (k,), descending, non-negative
    v: np.ndarray  # (n, k), orthonormal columns

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.s) @ self.v.T


def as_matrix(m, name: str = "matrix") -> np.ndarray:
    """Return ``m`` as a finite 2-D float64 array (copying only when needed)."""
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise LinalgError(f"{name} must be 2-D, got shape {a.shape}")
    if a.shape[0] < 1 or a.shape[1] < 1:
        raise LinalgError(f"{name} must have at least one row and column, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NonFiniteInput(f"{name} contains NaN or Inf")
    return a


def as_vector(x, name: str = "vector") -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 1:
        a = a.reshape(-1)
    if not np.all(np.isfinite(a)):
        raise NonFiniteInput(f"{name} contains NaN or Inf")
    return a


@functools.lru_cache(maxsize=64)
def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Circle-method schedule: n-1 rounds of n/2 disjoint pairs (n even).

    Cached, so callers must not modify the returned arrays."""
    idx = list(range(n))
    rounds = []
    for _ in range(n - 1):
        p = np.array([min(idx[i], idx[n - 1 - i]) for i in range(n // 2)])
        q = np.array([max(idx[i], idx[n - 1 - i]) for i in range(n // 2)])
        rounds.append((p, q))
        idx = [idx[0], idx[-1]] + idx[1:-1]
    return rounds


def _canonical_signs(u: np.ndarray, v: np.ndarray) -> None:
    """Flip (u_i, v_i) pairs so the largest-|.| entry of each u_i is >= 0."""
    if u.shape[0] == 0:
        return
    lead = np.argmax(np.abs(u), axis=0)  # argmax returns the lowest index on ties
    flip = u[lead, np.arange(u.shape[1])] < 0
    u[:, flip] *= -1.0
    v[:, flip] *= -1.0


def _eig_rotations(G: np.ndarray, max_sweeps: int = 1) -> np.ndarray:
    """Batched cyclic Jacobi for symmetric ``G`` (B, k, k); returns the rotations Q
    that (approximately) diagonalise it.

    By default a single sweep: the caller iterates over block pairs anyway,
    so fully converging each small subproblem only costs time.
    """
    nb, k, _ = G.shape
    Q = np.broadcast_to(np.eye(k), G.shape).copy()
    J = np.zeros((nb, k * k))
    for _ in range(max_sweeps):
        for p, q in _round_robin(k):
            d = np.einsum("bii->bi", G)
            app, aqq, apq = d[:, p], d[:, q], G[:, p, q]
            rot = np.abs(apq) > 1e-16 * np.sqrt(np.abs(app * aqq))
            if not rot.any():
                continue
            theta = (aqq - app) / np.where(rot, 2.0 * apq, 1.0)
            t = np.where(rot, np.where(theta >= 0, 1.0, -1.0)
                         / (np.abs(theta) + np.hypot(1.0, theta)), 0.0)
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            J.fill(0.0)
            J[:, p * k + p] = c
            J[:, q * k + q] = c
            J[:, p * k + q] = s
            J[:, q * k + p] = -s
            R = J.reshape(nb, k, k)
            G = R.transpose(0, 2, 1) @ G @ R
            Q = Q @ R
    return Q


def _block_precondition(work: np.ndarray, rows: int, block: int, tiny: float,
                        tol: float = 1e-12, max_sweeps: int = 40) -> None:
    """Block-pair sweeps that orthogonalise groups of columns through their Gram matrix.

    Gram-based rotations lose accuracy on badly scaled columns, so this only
    brings the columns close to orthogonal; the exact column sweeps that follow
    decide convergence. Stops early once a sweep no longer halves the worst
    measured off-diagonal cosine.
    """
    n = work.shape[0]
    blocks = np.arange(n).reshape(n // block, block)
    schedule = _round_robin(n // block)
    prev = np.inf
    for _ in range(max_sweeps):
        worst = 0.0
        for bp, bq in schedule:
            idx = np.concatenate([blocks[bp], blocks[bq]], axis=1)
            X = work[idx]
            Xa = X[:, :, :rows]
            G = Xa @ Xa.transpose(0, 2, 1)
            d = np.einsum("bii->bi", G)
            live = d > tiny
            scale = np.sqrt(np.outer(1.0, 1.0) * d[:, :, None] * d[:, None, :])
            mask = live[:, :, None] & live[:, None, :] & ~np.eye(idx.shape[1], dtype=bool)
            off = np.where(mask, np.abs(G) / np.where(mask, scale, 1.0), 0.0)
            m = off.max(axis=(1, 2))
            act = m > tol
            if not act.any():
                continue
            worst = max(worst, float(m.max()))
            Q = _eig_rotations(G[act])
            work[idx[act]] = Q.transpose(0, 2, 1) @ X[act]
        # the worst cosine is not monotone early on; only stop on a late stall
        if worst <= tol or (worst < 1e-4 and worst > 0.5 * prev):
            return
        prev = worst


BLOCK = 16


def svd(m, tol: float = SVD_TOL, max_sweeps: int = MAX_SWEEPS) -> SvdResult:
    """Thin SVD of a real matrix, ``m = u @ diag(s) @ v.T``.

    Deterministic for a given input. Raises NonConvergence when the relative
    off-diagonal mass of the column Gram matrix does not drop below ``tol``
    within ``max_sweeps`` sweeps. Matrices with many columns first go through
    a blocked Gram-based pass; the final answer always comes from exact
    one-sided rotations on the columns themselves.
    """
    a = as_matrix(m)
    transposed = a.shape[0] < a.shape[1]
    if transposed:
        a = a.T
    rows, cols = a.shape

    # Each row of `work` holds one working column of `a` followed by the
    # matching row of the accumulated right rotation, so a single gather per
    # side feeds both updates. Zero padding columns never rotate.
    blocked = cols >= 8 * BLOCK
    unit = 2 * BLOCK if blocked else 2
    n = cols + (-cols % unit)
    work = np.zeros((n, rows + n))
    work[:cols, :rows] = a.T
    work[:, rows:] = np.eye(n)
    rounds = _round_robin(n) if n > 1 else []

    norm_f = float(np.sqrt(np.sum(a * a)))
    tiny = (np.finfo(np.float64).eps * norm_f) ** 2

    converged = norm_f == 0.0 or n == 1
    if blocked and not converged:
        _block_precondition(work, rows, BLOCK, tiny)
    for _ in range(max_sweeps):
        if converged:
            break
        # squared column norms, refreshed each sweep and updated per rotation
        sq = np.einsum("ij,ij->i", work[:, :rows], work[:, :rows])
        worst = 0.0
        for p, q in rounds:
            alpha, beta = sq[p], sq[q]
            live = (alpha > tiny) & (beta > tiny)
            if not live.any():
                continue
            p, q, alpha, beta = p[live], q[live], alpha[live], beta[live]
            gamma = np.einsum("ij,ij->i", work[p, :rows], work[q, :rows])
            off = np.abs(gamma) / np.sqrt(alpha * beta)
            act = off > tol
            if not act.any():
                continue
            worst = max(worst, float(off.max()))
            if not act.all():
                p, q, alpha, beta, gamma = p[act], q[act], alpha[act], beta[act], gamma[act]
            wp, wq = work[p], work[q]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.hypot(1.0, zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = (c * t)[:, None]
            c = c[:, None]
            work[p] = c * wp - s * wq
            work[q] = s * wp + c * wq
            sq[p] = alpha - t * gamma
            sq[q] = beta + t * gamma
        if worst <= tol:
            converged = True
    if not converged:
        raise NonConvergence(f"Jacobi SVD did not converge in {max_sweeps} sweeps")

    g, w = work[:cols, :rows], work[:cols, rows:rows + cols]
    sv = np.sqrt(np.einsum("ij,ij->i", g, g))
    order = np.argsort(-sv, kind="stable")
    sv, g, w = sv[order], g[order], w[order]

    k = cols
    u = np.zeros((rows, k))
    cutoff = max(rows, cols) * np.finfo(np.float64).eps * (sv[0] if k else 0.0)
    good = sv > cutoff
    r = int(np.count_nonzero(good))
    if r:
        u[:, :r] = (g[:r] / sv[:r, None]).T
    if r < k:
        # orthonormal completion for the numerically-zero directions
        if r:
            basis, _ = np.linalg.qr(u[:, :r], mode="complete")
            u[:, r:] = basis[:, r:k]
        else:
            u[:, :] = np.eye(rows, k)
    v = w.T.copy()
    _canonical_signs(u, v)
    if transposed:
        u, v = v, u
    return SvdResult(u=u, s=sv, v=v)


def singular_values(m) -> np.ndarray:
    return svd(m).s


def rank1_triple(m) -> tuple[float, np.ndarray, np.ndarray]:
    """Top singular triple ``(sigma1, u1, v1)`` with the canonical sign."""
    a = as_matrix(m)
    res = svd(a)
    sigma1 = float(res.s[0])
    if sigma1 < DEGENERATE_RTOL * max(1.0, frobenius_norm(a)):
        raise DegenerateMatrix(f"largest singular value {sigma1:.3e} is numerically zero")
    return sigma1, res.u[:, 0].copy(), res.v[:, 0].copy()


def frobenius_norm(m) -> float:
    a = np.asarray(m, dtype=np.float64)
    return float(np.sqrt(np.sum(a * a)))


def _pair(a, b) -> tuple[np.ndarray, np.ndarray, float, float]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"shapes differ: {a.shape} vs {b.shape}")
    na, nb = frobenius_norm(a), frobenius_norm(b)
    if na == 0.0 or nb == 0.0:
        raise ZeroNorm("Frobenius norm of an operand is zero")
    return a, b, na, nb


def frob_cosine(a, b) -> float:
    """<a, b>_F / (|a|_F |b|_F), clipped to [-1, 1]."""
    a, b, na, nb = _pair(a, b)
    return float(np.clip(np.sum(a * b) / (na * nb), -1.0, 1.0))


def hadamard_norm_ratio(a, b) -> float:
    """|a * b|_F / (|a|_F |b|_F) with ``*`` the elementwise product."""
    a, b, na, nb = _pair(a, b)
    return frobenius_norm(a * b) / (na * nb)


def principal_angle(x, u) -> float:
    """Angle in [0, pi/2] between the line through ``x`` and the unit vector ``u``."""
    x = as_vector(x, "x")
    u = as_vector(u, "u")
    if x.shape != u.shape:
        raise ShapeMismatch(f"vector lengths differ: {x.shape} vs {u.shape}")
    nx = float(np.linalg.norm(x))
    if nx == 0.0:
        raise ZeroNorm("x has zero norm")
    nu = float(np.linalg.norm(u))
    if nu == 0.0:
        raise ZeroNorm("u has zero norm")
    if abs(nu - 1.0) > 1e-8:
        raise LinalgError(f"u must be a unit vector (norm {nu!r})")
    cos = min(1.0, max(0.0, abs(float(x @ u)) / nx))
    return math.acos(cos)


def subspace_angle(basis, u) -> float:
    """Smallest principal angle between span(basis columns) and unit vector ``u``.

    For a single column this reduces to :func:`principal_angle`. For several
    columns it is arccos of the largest canonical correlation, i.e. the norm
    of the projection of ``u`` onto the column space.
    """
    b = as_matrix(np.asarray(basis, dtype=np.float64).reshape(len(u), -1), "basis")
    u = as_vector(u, "u")
    res = svd(b)
    r = int(np.count_nonzero(res.s > DEGENERATE_RTOL * max(1.0, res.s[0])))
    if r == 0:
        raise ZeroNorm("basis spans the zero subspace")
    cos = min(1.0, float(np.linalg.norm(res.u[:, :r].T @ u)))
    return math.acos(cos)


def _spectrum(s) -> np.ndarray:
    s = as_vector(s, "singular values")
    if np.any(s < 0):
        raise LinalgError("singular values must be non-negative")
    if s.sum() <= 0:
        raise AllZero("spectrum sums to zero")
    return s


def effective_rank(s) -> float:
    """Entropy effective rank exp(-sum p log p), p = s / sum(s)."""
    s = _spectrum(s)
    p = s / s.sum()
    p = p[p > 0]
    return float(np.exp(-np.sum(p * np.log(p))))


def threshold_rank(s, tau: float = 0.01) -> int:
    """Number of singular values with s_i >= tau * s_1."""
    s = _spectrum(s)
    return int(np.count_nonzero(s >= tau * s.max()))


def numerical_rank(m, rtol: float = 1e-10) -> int:
    s = svd(m).s
    if s[0] == 0.0:
        return 0
    return int(np.count_nonzero(s > rtol * s[0]))


def sigma_ratio(m) -> float:
    """sigma_2 / sigma_1 (0 for rank-0 or single-column input)."""
    s = svd(m).s
    if s.size < 2 or s[0] == 0.0:
        return 0.0
    return float(s[1] / s[0])
