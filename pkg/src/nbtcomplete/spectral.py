"""Top eigenpairs of the non-backtracking operator.

The eigensolver is an explicitly restarted Arnoldi method: the basis is
grown by repeated application of the operator with two-pass classical
Gram-Schmidt, the projected matrix is diagonalized with the in-repo QR
solver (:mod:`nbtcomplete.schur`), and each restart keeps a real orthonormal
basis of the leading Ritz vectors. No implicit shifts are used.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import schur
from .rng import stream, unit_sphere

log = logging.getLogger(__name__)

EPS = np.finfo(float).eps


@dataclass
class EigenPair:
    lam: complex
    right_vec: np.ndarray = field(repr=False)
    residual: float
    converged: bool = True
    left_vec: np.ndarray | None = field(default=None, repr=False)
    left_residual: float | None = None

    @property
    def modulus(self) -> float:
        return abs(self.lam)


@dataclass
class ArnoldiResult:
    pairs: list[EigenPair]
    restarts: int
    n_applies: int
    breakdown: bool = False

    @property
    def all_converged(self) -> bool:
        return all(p.converged for p in self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    def __len__(self):
        return len(self.pairs)

    def __getitem__(self, i):
        return self.pairs[i]


def sort_order(values: np.ndarray) -> np.ndarray:
    """Indices sorting by modulus descending, then real part descending, then imaginary ascending.

    Moduli and real parts are compared after rounding to 1e-10 of the
    largest modulus so that conjugate pairs and exact ties sort stably.
    """
    values = np.asarray(values, dtype=complex)
    if values.size == 0:
        return np.zeros(0, dtype=np.int64)
    scale = float(np.abs(values).max()) or 1.0
    q = 1e-10 * scale
    mod = np.round(np.abs(values) / q)
    re = np.round(values.real / q)
    im = np.round(values.imag / q)
    return np.lexsort((im, -re, -mod))


def _close_conjugates(values: np.ndarray, order: np.ndarray, count: int) -> int:
    # extend a prefix of `order` so that it does not split a conjugate pair
    count = min(count, order.size)
    if 0 < count < order.size:
        last = values[order[count - 1]]
        nxt = values[order[count]]
        if last.imag != 0.0 and abs(nxt - last.conjugate()) <= 1e-12 * max(abs(last), 1.0):
            count += 1
    return count


def _orthogonalize(basis: np.ndarray, v: np.ndarray):
    """Two-pass classical Gram-Schmidt of ``v`` against orthonormal columns."""
    norm0 = float(np.linalg.norm(v))
    if norm0 == 0.0:
        return v, 0.0, False
    if basis.shape[1]:
        v = v - basis @ (basis.T @ v)
        v = v - basis @ (basis.T @ v)
    nrm = float(np.linalg.norm(v))
    if nrm <= 1e-10 * norm0:
        return v, nrm, False
    return v / nrm, nrm, True


def _real_basis(y: np.ndarray, theta: np.ndarray, cols: np.ndarray) -> np.ndarray:
    # one real column per real Ritz vector, (re, im) once per conjugate pair
    out = []
    for j in cols:
        c = y[:, j]
        if theta[j].imag == 0.0:
            out.append(c.real)
        elif theta[j].imag > 0.0:
            out.append(c.real)
            out.append(c.imag)
    return np.column_stack(out)


def _real_times(a: np.ndarray, y: np.ndarray) -> np.ndarray:
    # real matrix times complex matrix without promoting the tall factor
    if not y.imag.any():
        return a @ y.real
    return a @ y.real + 1j * (a @ y.imag)


def arnoldi_topk(
    op: Callable[[np.ndarray], np.ndarray],
    dim: int,
    k: int,
    krylov_dim: int | None = None,
    tol: float = 1e-8,
    max_restarts: int = 200,
    seed: int = 0,
) -> ArnoldiResult:
    """Top-``k`` eigenpairs (by modulus) of a real operator given as a black box.

    Converged means ``||op(x) - lam x|| <= tol * |lam|``. Complex conjugate
    pairs are always returned together, so up to ``k + 1`` pairs may come
    back. ``k`` and ``krylov_dim`` are clamped to ``dim``.
    """
    if dim == 0 or k <= 0:
        return ArnoldiResult([], 0, 0)
    if tol <= 0:
        raise ValueError("tol must be positive")
    k = min(k, dim)
    p_max = krylov_dim if krylov_dim is not None else max(4 * k, 32)
    if p_max <= k and p_max < dim:
        raise ValueError(f"krylov_dim ({p_max}) must exceed k ({k})")
    p_max = min(p_max, dim)

    V = np.zeros((dim, p_max), order="F")
    W = np.zeros((dim, p_max), order="F")
    gen = stream(seed, 0x4A524E)
    n_applies = 0
    breakdown = False

    V[:, 0] = unit_sphere(gen, dim)
    W[:, 0] = op(V[:, 0])
    n_applies += 1
    p = 1
    cand = None
    restart = 0
    while True:
        while p < p_max:
            if cand is None:
                cand = W[:, p - 1]
            cand, _, ok = _orthogonalize(V[:, :p], cand)
            attempts = 0
            while not ok and attempts < 5:
                breakdown = True
                cand, _, ok = _orthogonalize(V[:, :p], unit_sphere(gen, dim))
                attempts += 1
            if not ok:
                break
            V[:, p] = cand
            W[:, p] = op(cand)
            n_applies += 1
            p += 1
            cand = None

        H = V[:, :p].T @ W[:, :p]
        theta, Y = schur.eig(H)
        order = sort_order(theta)
        n_sel = _close_conjugates(theta, order, k)
        top = order[:n_sel]
        Yt = Y[:, top]
        X = _real_times(V[:, :p], Yt)
        R = _real_times(W[:, :p], Yt) - X * theta[top]
        res = np.linalg.norm(R, axis=0)
        floor = 1e3 * EPS * float(np.linalg.norm(H))
        conv = res <= np.maximum(tol * np.abs(theta[top]), floor)
        full_space = p == dim

        if conv.all() or full_space or restart >= max_restarts:
            break

        keep = min(p_max - 1, max(n_sel + 1, (n_sel + p_max) // 2))
        keep = _close_conjugates(theta, order, keep)
        C = _real_basis(Y, theta, order[:keep])
        while C.shape[1] >= p_max and keep > 1:
            keep -= 1
            C = _real_basis(Y, theta, order[:keep])
        C, _ = np.linalg.qr(C)
        q = C.shape[1]
        V[:, :q] = V[:, :p] @ C
        W[:, :q] = W[:, :p] @ C
        p = q
        # expand along the residual of the worst wanted pair
        worst = int(np.argmax(np.where(conv, -1.0, res)))
        r = R[:, worst]
        cand = r.real + r.imag
        restart += 1

    pairs = []
    for j, idx in enumerate(top):
        lam = complex(theta[idx])
        x = X[:, j]
        if lam.imag == 0.0:
            x = x.real.astype(float)
        x = x / np.linalg.norm(x)
        resid = float(np.linalg.norm(op(x) - lam * x))
        n_applies += 1
        ok = resid <= max(tol * abs(lam), floor)
        pairs.append(EigenPair(lam=lam, right_vec=x, residual=resid, converged=bool(ok)))
    if not all(pp.converged for pp in pairs):
        log.warning("arnoldi: %d of %d pairs unconverged after %d restarts",
                    sum(not pp.converged for pp in pairs), len(pairs), restart)
    return ArnoldiResult(pairs, restart, n_applies, breakdown)


def attach_left_vectors(right: list[EigenPair], left: list[EigenPair], tol: float = 1e-8) -> list[EigenPair]:
    """Match left eigenpairs to right ones by eigenvalue proximity (greedy).

    A match requires ``|lam_left - lam_right| <= 100 * tol * max(1, |lam|)``.
    """
    used = set()
    cands = sorted(
        (abs(r.lam - l.lam), i, j)
        for i, r in enumerate(right)
        for j, l in enumerate(left)
    )
    matched = {}
    for dist, i, j in cands:
        if i in matched or j in used:
            continue
        if dist <= 100 * tol * max(1.0, abs(right[i].lam)):
            matched[i] = j
            used.add(j)
    for i, j in matched.items():
        right[i].left_vec = left[j].right_vec
        right[i].left_residual = left[j].residual
    return right


def eigenpairs(tp, k: int, krylov_dim: int | None = None, tol: float = 1e-8,
               max_restarts: int = 200, seed: int = 0, with_left: bool = True,
               k_left: int | None = None) -> ArnoldiResult:
    """Right (and optionally left) top-k eigenpairs of B for a two-path set.

    ``k_left`` limits the transpose solve (default ``k``); left vectors are
    attached only to the right pairs they match.
    """
    from .nbt_operator import B_operator

    res = arnoldi_topk(B_operator(tp), len(tp), k, krylov_dim, tol, max_restarts, seed)
    k_left = k if k_left is None else k_left
    if with_left and res.pairs and k_left > 0:
        left = arnoldi_topk(B_operator(tp, transpose=True), len(tp), k_left, krylov_dim, tol, max_restarts, seed + 1)
        attach_left_vectors(res.pairs, left.pairs, tol)
        res.n_applies += left.n_applies
    return res


@dataclass
class SpectrumSummary:
    outliers: list[EigenPair]
    bulk: list[EigenPair]
    bulk_radius: float
    k_requested: int
    k_converged: int
    bulk_ratio: float  # bulk_radius / theta**2, diagnostic only
    partial: bool = False


def classify_spectrum(pairs, r0: int, theta: float, ell: int = 1) -> SpectrumSummary:
    """Label the first ``r0`` pairs as outliers; the next modulus is the bulk radius.

    ``ell`` is accepted for the record; the unknown constant in the bulk
    bound means only ``bulk_radius / theta**2`` is reported.
    """
    pairs = list(pairs)
    partial = len(pairs) < r0
    if partial:
        log.warning("only %d pairs available for detection rank %d", len(pairs), r0)
    outliers = pairs[:r0]
    bulk = pairs[r0:]
    bulk_radius = bulk[0].modulus if bulk else float("nan")
    ratio = bulk_radius / theta**2 if theta > 0 and bulk else float("nan")
    return SpectrumSummary(
        outliers=outliers,
        bulk=bulk,
        bulk_radius=bulk_radius,
        k_requested=len(pairs),
        k_converged=sum(p.converged for p in pairs),
        bulk_ratio=ratio,
        partial=partial,
    )


def gap_rank(pairs, min_ratio: float = 2.0) -> int:
    """Blind outlier count: position of the largest modulus ratio, if it exceeds ``min_ratio``."""
    mods = np.array([p.modulus for p in pairs])
    if mods.size < 2:
        return 0
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = mods[:-1] / np.maximum(mods[1:], 1e-300)
    i = int(np.argmax(ratios))
    return i + 1 if ratios[i] >= min_ratio else 0


def power_apply(op, v: np.ndarray, ell: int) -> tuple[np.ndarray, float]:
    """``op^ell v`` as a unit vector times ``exp(log_scale)``."""
    if ell < 0:
        raise ValueError("ell must be >= 0")
    w = np.array(v, copy=True)
    log_scale = 0.0
    for step in range(ell + 1):
        if step:
            w = op(w)
        nrm = float(np.linalg.norm(w))
        if nrm == 0.0:
            return np.zeros_like(w), -math.inf
        w = w / nrm
        log_scale += math.log(nrm)
    return w, log_scale
