"""Dense linear-algebra and statistics kernels.

Everything here is a pure function of its inputs and works in float64.
Ties are always broken toward the lowest index.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ConvergenceError, DegenerateError, ValidationError

EIGEN_MAX_ITER = 10_000
EIGEN_TOL = 1e-10
KMEANS_MAX_ITER = 100


def as_matrix(X, name="X") -> np.ndarray:
    """Return ``X`` as a finite 2-D float64 array or raise ValidationError."""
    A = np.asarray(X, dtype=np.float64)
    if A.ndim == 1:
        A = A[:, None]
    if A.ndim != 2:
        raise ValidationError(f"{name} must be 2-D, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ValidationError(f"{name} contains non-finite entries")
    return A


def as_vector(x, name="x") -> np.ndarray:
    v = np.asarray(x, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(v)):
        raise ValidationError(f"{name} contains non-finite entries")
    return v


def pairwise_euclidean(X) -> np.ndarray:
    """Symmetric matrix of Euclidean distances between the rows of ``X``."""
    X = as_matrix(X)
    if X.shape[0] < 1:
        raise ValidationError("need at least one row")
    return _pairwise(X)


def _pairwise(X: np.ndarray) -> np.ndarray:
    # Difference form rather than the Gram trick: exact zeros on the diagonal
    # and no cancellation for nearby points.
    diff = X[:, None, :] - X[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


@dataclass(frozen=True)
class EigenResult:
    values: np.ndarray   # (r,), non-increasing
    vectors: np.ndarray  # (d, r), orthonormal columns
    iterations: int = 0
    residual: float = 0.0


def _fix_signs(V: np.ndarray) -> np.ndarray:
    # Largest-magnitude entry of each column made positive (first on ties).
    idx = np.argmax(np.abs(V), axis=0)
    signs = np.sign(V[idx, np.arange(V.shape[1])])
    signs[signs == 0] = 1.0
    return V * signs


def top_r_eigen(S, r: int, max_iter: int = EIGEN_MAX_ITER, tol: float = EIGEN_TOL) -> EigenResult:
    """Leading ``r`` eigenpairs of a symmetric PSD matrix.

    Block orthogonal iteration with Rayleigh-Ritz extraction. The block is
    oversampled (``min(d, 2r + 4)`` columns) so convergence is governed by
    the gap to the first eigenvalue outside the block, not the one right
    after ``r``. Converged leading Ritz vectors are locked and deflated from
    the working block. The start block comes from a fixed generator so the
    result is a pure function of ``S``.

    Converged when ``||S V - V diag(values)||_F <= tol * max(1, ||S||_F)``.
    """
    S = as_matrix(S, "S")
    d = S.shape[0]
    if S.shape != (d, d):
        raise ValidationError(f"S must be square, got {S.shape}")
    if not np.allclose(S, S.T, rtol=0.0, atol=1e-10):
        raise ValidationError("S is not symmetric within 1e-10")
    if not 1 <= r <= d:
        raise ValidationError(f"need 1 <= r <= d, got r={r}, d={d}")
    S = 0.5 * (S + S.T)

    scale = max(1.0, float(np.linalg.norm(S)))
    block = min(d, 2 * r + 4)
    Q, _ = np.linalg.qr(np.random.default_rng(0).standard_normal((d, block)))

    locked = np.zeros((d, 0))
    locked_vals = np.zeros(0)
    residual = np.inf
    for it in range(1, max_iter + 1):
        if locked.shape[1]:
            Q = Q - locked @ (locked.T @ Q)
        Q, _ = np.linalg.qr(S @ Q)
        if locked.shape[1]:
            Q = Q - locked @ (locked.T @ Q)
            Q, _ = np.linalg.qr(Q)
        # Rayleigh-Ritz on the small projected problem.
        H = Q.T @ S @ Q
        w, Y = np.linalg.eigh(0.5 * (H + H.T))
        order = np.argsort(-w, kind="stable")
        w, Q = w[order], Q @ Y[:, order]

        need = r - locked.shape[1]
        res_cols = np.linalg.norm(S @ Q[:, :need] - Q[:, :need] * w[:need], axis=0)
        # Lock the converged prefix; the rest keeps iterating.
        n_ok = 0
        while n_ok < need and res_cols[n_ok] <= tol * scale:
            n_ok += 1
        if n_ok:
            locked = np.hstack([locked, Q[:, :n_ok]])
            locked_vals = np.concatenate([locked_vals, w[:n_ok]])
            Q = Q[:, n_ok:]
            if locked.shape[1] == r:
                break
        residual = float(np.linalg.norm(res_cols))
    else:
        raise ConvergenceError(f"top_r_eigen did not converge in {max_iter} iterations", residual)

    order = np.argsort(-locked_vals, kind="stable")
    vals, vecs = locked_vals[order], _fix_signs(locked[:, order])
    residual = float(np.linalg.norm(S @ vecs - vecs * vals))
    if residual > tol * scale * np.sqrt(r) * 10:
        raise ConvergenceError("locked eigenvectors lost accuracy", residual)
    return EigenResult(vals, vecs, iterations=it, residual=residual)


def softmax_temp(scores, tau: float, negate: bool = False) -> np.ndarray:
    """Temperature softmax along the last axis, max-shifted for stability.

    ``negate=True`` gives ``exp(-s/tau) / sum exp(-s/tau)``.
    """
    if not tau > 0:
        raise ValidationError(f"temperature must be > 0, got {tau}")
    s = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(s)):
        raise ValidationError("scores contain non-finite entries")
    logits = (-s if negate else s) / tau
    logits = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def pearson(a, b) -> float:
    """Pearson correlation; raises DegenerateError on zero variance."""
    a, b = as_vector(a, "a"), as_vector(b, "b")
    if a.shape != b.shape or a.size < 2:
        raise ValidationError("pearson needs two equal-length vectors of length >= 2")
    ac, bc = a - a.mean(), b - b.mean()
    na, nb = np.sqrt(ac @ ac), np.sqrt(bc @ bc)
    if na == 0.0 or nb == 0.0:
        raise DegenerateError("correlation undefined: zero variance")
    return float(np.clip((ac @ bc) / (na * nb), -1.0, 1.0))


class KMeansResult(NamedTuple):
    assignments: np.ndarray  # (n,) int
    centers: np.ndarray      # (K, d)
    history: list            # objective after each assignment step


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    diff = X[:, None, :] - C[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def _kmeanspp(X: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = _sq_dists(X, X[chosen]).min(axis=1)
    for _ in range(1, K):
        total = d2.sum()
        if total > 0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            # All remaining points coincide with a center.
            idx = next(i for i in range(n) if i not in chosen)
        chosen.append(idx)
        d2 = np.minimum(d2, _sq_dists(X, X[[idx]])[:, 0])
    return X[chosen].copy()


def kmeans(X, K: int, seed: int, max_iter: int = KMEANS_MAX_ITER) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding.

    Stops when the assignment vector repeats. Empty clusters take the point
    farthest from its current center.
    """
    X = as_matrix(X)
    n = X.shape[0]
    if not 1 <= K <= n:
        raise ValidationError(f"need 1 <= K <= n, got K={K}, n={n}")
    rng = np.random.default_rng(seed)
    centers = _kmeanspp(X, K, rng)

    assign = None
    history = []
    for _ in range(max_iter):
        d2 = _sq_dists(X, centers)
        new_assign = np.argmin(d2, axis=1)
        history.append(float(d2[np.arange(n), new_assign].sum()))
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for k in range(K):
            if not np.any(assign == k):
                # Steal the worst-fit point from a cluster that can spare one.
                counts = np.bincount(assign, minlength=K)
                own = np.where(counts[assign] > 1, d2[np.arange(n), assign], -1.0)
                assign[int(np.argmax(own))] = k
        for k in range(K):
            centers[k] = X[assign == k].mean(axis=0)
    return KMeansResult(assign.astype(np.int64), centers, history)
