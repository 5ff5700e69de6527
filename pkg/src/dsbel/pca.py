"""Principal components via cyclic Jacobi rotations on the covariance matrix."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class PcaError(ValueError):
    pass


def _round_robin(m: int):
    """Yield m-1 rounds of m/2 disjoint (p, q) pairs covering every pair once."""
    idx = list(range(m))
    for _ in range(m - 1):
        half = m // 2
        p = np.array(idx[:half])
        q = np.array(idx[half:][::-1])
        yield np.minimum(p, q), np.maximum(p, q)
        idx = [idx[0]] + [idx[-1]] + idx[1:-1]


def off_norm(A) -> float:
    return float(math.sqrt(max(0.0, np.sum(A * A) - np.sum(np.diag(A) ** 2))))


def jacobi_eigh(S, tol: float = 1e-10, max_sweeps: int = 100) -> tuple:
    """Eigen-decomposition of a symmetric matrix by parallel-ordered cyclic Jacobi.

    Each round applies n/2 disjoint rotations at once.  Iteration stops when
    the off-diagonal Frobenius norm drops below ``max(tol, 1e-14 * ||S||_F)``;
    the relative floor keeps large-scale inputs from chasing round-off.
    Returns unsorted ``(eigenvalues, eigenvectors)``.
    """
    A = np.array(S, dtype=np.float64)
    n = A.shape[0]
    if A.ndim != 2 or A.shape[1] != n:
        raise PcaError(f"expected a square matrix, got {A.shape}")
    A = 0.5 * (A + A.T)
    V = np.eye(n)
    if n < 2:
        return np.diag(A).copy(), V
    m = n + (n % 2)
    threshold = max(tol, 1e-14 * float(np.linalg.norm(A)))
    for _ in range(max_sweeps):
        if off_norm(A) < threshold:
            break
        for p, q in _round_robin(m):
            keep = q < n  # drop the padding index when n is odd
            p, q = p[keep], q[keep]
            apq = A[p, q]
            active = apq != 0.0
            if not active.any():
                continue
            p, q, apq = p[active], q[active], apq[active]
            tau = (A[q, q] - A[p, p]) / (2.0 * apq)
            t = np.where(tau >= 0, 1.0, -1.0) / (np.abs(tau) + np.sqrt(1.0 + tau * tau))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = t * c
            Ap, Aq = A[:, p].copy(), A[:, q]
            A[:, p] = c * Ap - s * Aq
            A[:, q] = s * Ap + c * Aq
            Ap, Aq = A[p, :].copy(), A[q, :]
            A[p, :] = c[:, None] * Ap - s[:, None] * Aq
            A[q, :] = s[:, None] * Ap + c[:, None] * Aq
            A[p, q] = 0.0
            A[q, p] = 0.0
            Vp, Vq = V[:, p].copy(), V[:, q]
            V[:, p] = c * Vp - s * Vq
            V[:, q] = s * Vp + c * Vq
    return np.diag(A).copy(), V


@dataclass
class PcaModel:
    mean: np.ndarray
    components: np.ndarray  # (D, k), orthonormal columns
    eigenvalues: np.ndarray  # (k,), descending

    @property
    def k(self) -> int:
        return self.components.shape[1]


def pca_fit(X, k: int = 3, tol: float = 1e-10) -> PcaModel:
    """Top-``k`` principal axes of ``X`` (covariance with ddof 1).

    When there are fewer rows than columns the smaller Gram matrix is
    diagonalized instead, unless ``k`` reaches into the null space.

    Each axis is signed so its largest-magnitude entry is positive.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise PcaError(f"need at least 2 rows, got shape {X.shape}")
    d = X.shape[1]
    if not 1 <= k <= d:
        raise PcaError(f"k={k} must lie in [1, {d}]")
    n = X.shape[0]
    mean = X.mean(axis=0)
    Xc = X - mean
    vals = vecs = None
    if n - 1 < d:
        # Wide data: the covariance has rank <= n-1, so diagonalize the n x n
        # Gram matrix and map its eigenvectors back (same nonzero spectrum).
        gvals, gvecs = jacobi_eigh(Xc @ Xc.T / (n - 1), tol)
        order = np.argsort(-gvals, kind="stable")[:k]
        gvals = gvals[order]
        if gvals[-1] > 1e-9 * max(gvals[0], 1e-300):
            vecs = Xc.T @ gvecs[:, order] / np.sqrt(gvals * (n - 1))
            vecs /= np.linalg.norm(vecs, axis=0)
            vals = gvals
    if vecs is None:
        cov = Xc.T @ Xc / (n - 1)
        vals, vecs = jacobi_eigh(cov, tol)
        order = np.argsort(-vals, kind="stable")[:k]
        vals, vecs = vals[order], vecs[:, order]
    vals = np.maximum(vals, 0.0)
    lead = np.abs(vecs).argmax(axis=0)
    vecs = vecs * np.where(vecs[lead, np.arange(k)] < 0, -1.0, 1.0)
    return PcaModel(mean, vecs, vals)


def pca_project(model: PcaModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != len(model.mean):
        raise PcaError(f"expected {len(model.mean)} columns, got shape {X.shape}")
    return (X - model.mean) @ model.components


def pca_reconstruct(model: PcaModel, Y) -> np.ndarray:
    return np.asarray(Y, dtype=np.float64) @ model.components.T + model.mean
