"""Shift-inverted Lanczos with full reorthogonalisation for the low end of a symmetric spectrum."""
from __future__ import annotations

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.sparse.linalg import splu


class LanczosConvergenceError(RuntimeError):
    pass


def lanczos_smallest(
    A: sp.spmatrix,
    k: int,
    shift: float = 0.0,
    tol: float = 1e-8,
    max_dim: int | None = None,
    seed: int = 0,
    check_every: int = 10,
):
    """k smallest eigenpairs of the symmetric sparse matrix ``A``.

    Lanczos runs on ``(A - shift I)^{-1}``, whose largest eigenvalues map to the
    eigenvalues of ``A`` closest to ``shift``. Every new Krylov vector is
    orthogonalised twice against the whole basis. Convergence is declared
    when ``||A y - lam y|| <= tol * max(1, |lam|)`` for all k unit Ritz vectors.

    Returns (eigenvalues ascending, unit eigenvectors as columns, residual norms).
    """
    n = A.shape[0]
    if not 0 < k < n:
        raise ValueError(f"need 0 < k < n, got k={k}, n={n}")
    A = sp.csr_matrix(A)
    lu = splu((A - shift * sp.identity(n, format="csr")).tocsc())
    max_dim = min(n, max_dim or max(3 * k, k + 120))
    rng = np.random.default_rng(seed)

    Q = np.empty((n, max_dim + 1))
    alpha = np.zeros(max_dim)
    beta = np.zeros(max_dim)
    q = rng.standard_normal(n)
    Q[:, 0] = q / np.linalg.norm(q)
    last = None
    for j in range(max_dim):
        w = lu.solve(Q[:, j])
        alpha[j] = Q[:, j] @ w
        for _ in range(2):
            w -= Q[:, : j + 1] @ (Q[:, : j + 1].T @ w)
        b = np.linalg.norm(w)
        beta[j] = b
        dim = j + 1
        breakdown = b <= 1e-13 * max(1.0, abs(alpha[j]))
        if breakdown and dim < max_dim:
            # invariant subspace: continue with a fresh random direction
            w = rng.standard_normal(n)
            for _ in range(2):
                w -= Q[:, :dim] @ (Q[:, :dim].T @ w)
            w /= np.linalg.norm(w)
            beta[j] = 0.0
        else:
            w = w / b if b > 0 else w
        Q[:, j + 1] = w
        if dim >= k and (dim % check_every == 0 or dim == max_dim):
            last = _ritz(A, Q[:, :dim], alpha[:dim], beta[: dim - 1], k, shift)
            lam, Y, res = last
            if np.all(res <= tol * np.maximum(1.0, np.abs(lam))):
                return lam, Y, res
    lam, Y, res = last if last is not None else _ritz(A, Q[:, :max_dim], alpha, beta[:-1], k, shift)
    worst = float(np.max(res / np.maximum(1.0, np.abs(lam))))
    raise LanczosConvergenceError(
        f"Lanczos did not converge within {max_dim} vectors (worst relative residual {worst:.3g})"
    )


def _ritz(A, Q, alpha, beta, k, shift):
    theta, S = scipy.linalg.eigh_tridiagonal(alpha, beta)
    # largest theta of the inverse are the eigenvalues nearest the shift
    order = np.argsort(-theta)[:k]
    lam = shift + 1.0 / theta[order]
    Y = Q @ S[:, order]
    Y /= np.linalg.norm(Y, axis=0)
    res = np.linalg.norm(A @ Y - Y * lam, axis=0)
    idx = np.argsort(lam)
    return lam[idx], Y[:, idx], res[idx]
