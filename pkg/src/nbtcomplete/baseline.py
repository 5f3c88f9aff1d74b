"""Truncated SVD of the observed matrix, for comparison only."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .rng import stream
from .sparse_core import ObservedMatrix

log = logging.getLogger(__name__)


@dataclass
class SVDBaseline:
    singular_values: np.ndarray
    left: np.ndarray = field(repr=False)  # (k, n)
    iterations: int = 0
    converged: bool = True


def truncated_svd_baseline(obs: ObservedMatrix, k: int, tol: float = 1e-8, max_iter: int = 5000,
                           oversample: int = 4, seed: int = 0) -> SVDBaseline:
    """Top-k left singular vectors of A by block power iteration on A A^T.

    A A^T is never formed: each step applies A^T then A. Convergence is
    ``||A A^T x - s^2 x|| <= tol * s_1^2`` for every kept Ritz vector.
    """
    n = obs.n
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    A = obs.to_csr()
    b = min(n, k + oversample)
    X, _ = np.linalg.qr(stream(seed, 0x535644).standard_normal((n, b)))
    vals = np.zeros(b)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        Y = A @ (A.T @ X)
        # Rayleigh-Ritz on the current block
        H = X.T @ Y
        H = 0.5 * (H + H.T)
        w, V = np.linalg.eigh(H)
        order = np.argsort(w)[::-1]
        w, V = w[order], V[:, order]
        Xr, Yr = X @ V, Y @ V
        vals = np.maximum(w, 0.0)
        top = vals[0]
        if top == 0.0:
            converged = True
            X = Xr
            break
        res = np.linalg.norm(Yr[:, :k] - Xr[:, :k] * w[:k], axis=0)
        if np.all(res <= tol * top):
            converged = True
            X = Xr
            break
        X, _ = np.linalg.qr(Yr)
    if not converged:
        log.warning("truncated SVD baseline: not converged after %d iterations", it)
    U = X[:, :k].T.copy()
    for i in range(k):
        j = int(np.argmax(np.abs(U[i])))
        if U[i, j] < 0:
            U[i] *= -1
    return SVDBaseline(np.sqrt(vals[:k]), U, it, converged)
