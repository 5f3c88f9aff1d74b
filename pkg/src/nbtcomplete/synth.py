"""Ground-truth low-rank long matrices and Bernoulli observations.

``M`` is never stored densely: entries are evaluated from the rank-r factors
``M[x, y] = sum_i nu_i phi_i[x] psi_i[y]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import reduce

import numpy as np
from scipy.linalg import hadamard
from scipy.optimize import brentq

from .rng import stream
from .sparse_core import ObservedMatrix, ingest_arrays

VECTOR_MODES = ("uniform-sign", "random-orthonormal", "localized")
SAMPLER_MODES = ("exact-Bernoulli", "fixed-count")
DEFAULT_NNZ_CAP = 5 * 10**7


class GenerationError(ValueError):
    pass


@dataclass(frozen=True)
class CPFactors:
    """CP description of an order-k tensor ``sum_i w_i a_i^(1) x ... x a_i^(k)``."""

    k_order: int
    weights: np.ndarray
    factors: tuple  # r tuples of k unit vectors


@dataclass(frozen=True)
class GroundTruth:
    n: int
    m: int
    nu: np.ndarray
    phi: np.ndarray = field(repr=False)  # (r, n)
    psi: np.ndarray = field(repr=False)  # (r, m)
    homogeneous: bool = False
    vector_mode: str = "random-orthonormal"
    cp: CPFactors | None = field(default=None, repr=False)

    @property
    def r(self) -> int:
        return int(self.nu.size)

    def entries(self, xs, ys) -> np.ndarray:
        xs = np.asarray(xs, dtype=np.int64)
        ys = np.asarray(ys, dtype=np.int64)
        if self.cp is not None:
            return self._cp_entries(xs, ys)
        return np.einsum("i,i...,i...->...", self.nu, self.phi[:, xs], self.psi[:, ys])

    def _cp_entries(self, xs, ys) -> np.ndarray:
        # tensor entry sum_i w_i a_i(x) b_i(y_1) ... with y_1 the most significant digit
        cp, n = self.cp, self.n
        digits = []
        rem = ys
        for _ in range(cp.k_order - 1):
            rem, dig = np.divmod(rem, n)
            digits.append(dig)
        digits.reverse()
        out = np.zeros(np.broadcast(xs, ys).shape)
        for w, comp in zip(cp.weights, cp.factors):
            term = w * comp[0][xs]
            for f, dig in zip(comp[1:], digits):
                term = term * f[dig]
            out = out + term
        return out

    def __call__(self, x: int, y: int) -> float:
        return float(self.entries(x, y))

    def scaled(self, c: float) -> "GroundTruth":
        return GroundTruth(self.n, self.m, self.nu * c, self.phi, self.psi,
                           self.homogeneous, self.vector_mode, self.cp)

    def dense(self, cap: int = 10**7) -> np.ndarray:
        if self.n * self.m > cap:
            raise GenerationError(f"refusing to materialize {self.n}x{self.m} matrix")
        return (self.phi.T * self.nu) @ self.psi

    def gram_deviation(self) -> float:
        r = self.r
        g1 = np.abs(self.phi @ self.phi.T - np.eye(r)).max() if r else 0.0
        g2 = np.abs(self.psi @ self.psi.T - np.eye(r)).max() if r else 0.0
        return float(max(g1, g2))


def _sign_basis(size: int, r: int, gen: np.random.Generator) -> np.ndarray:
    """r orthonormal vectors with entries +-1/sqrt(size)."""
    block = 1 << max(0, math.ceil(math.log2(r))) if r > 1 else 1
    if size % block:
        raise GenerationError(f"uniform-sign mode with r={r} needs dimension divisible by {block}, got {size}")
    h = hadamard(block)[:r] if block > 1 else np.ones((1, 1))
    signs = gen.choice(np.array([-1.0, 1.0]), size=size)
    base = h[:, np.arange(size) % block] * signs
    perm = gen.permutation(size)
    return base[:, perm] / math.sqrt(size)


def _orthonormal(size: int, r: int, gen: np.random.Generator) -> np.ndarray:
    q, rr = np.linalg.qr(gen.standard_normal((size, r)))
    q *= np.sign(np.diag(rr))
    return q.T.copy()


def _localize(h: np.ndarray, kappa: float, gen: np.random.Generator) -> np.ndarray:
    r, n = h.shape
    x0 = int(gen.integers(n))
    u = -h.T @ h[:, x0]
    u[x0] += 1.0
    u /= np.linalg.norm(u)
    u *= math.copysign(1.0, h[0, x0])
    root_n = math.sqrt(n)

    def measured(a):
        return root_n * np.abs(math.cos(a) * h[0] + math.sin(a) * u).max()

    top = measured(math.pi / 2)
    if kappa > top:
        raise GenerationError(f"kappa_target {kappa} exceeds achievable {top:.4g}")
    base = measured(0.0)
    a = 0.0 if kappa <= base else brentq(lambda t: measured(t) - kappa, 0.0, math.pi / 2, xtol=1e-14)
    out = h.copy()
    out[0] = math.cos(a) * h[0] + math.sin(a) * u
    return out


def gen_rank_r(n, m, r, nu, vector_mode="random-orthonormal", seed=0, kappa_target=None) -> GroundTruth:
    """Rank-r ground truth with orthonormal factors.

    uniform-sign: +-1/sqrt(n) entries (homogeneous when r == 1).
    random-orthonormal: QR of Gaussian matrices.
    localized: uniform-sign base with the first left vector rotated toward a
    coordinate until sqrt(n) * max|phi| equals ``kappa_target``.
    """
    n, m, r = int(n), int(m), int(r)
    nu = np.asarray(nu, dtype=float).ravel()
    if nu.size == 1 and r > 1:
        nu = np.full(r, nu[0])
    if nu.size != r:
        raise GenerationError(f"expected {r} singular values, got {nu.size}")
    if r < 1 or r > n:
        raise GenerationError(f"rank must satisfy 1 <= r <= n, got {r}")
    if (nu <= 0).any() or (np.diff(nu) > 0).any():
        raise GenerationError("singular values must be positive and non-increasing")
    if vector_mode not in VECTOR_MODES:
        raise GenerationError(f"unknown vector_mode {vector_mode!r}")
    gen_l, gen_r = stream(seed, 11), stream(seed, 12)
    if vector_mode == "uniform-sign":
        phi = _sign_basis(n, r, gen_l)
        psi = _sign_basis(m, r, gen_r)
    elif vector_mode == "random-orthonormal":
        phi = _orthonormal(n, r, gen_l)
        psi = _orthonormal(m, r, gen_r)
    else:
        if kappa_target is None:
            raise GenerationError("localized mode needs kappa_target")
        if kappa_target < 1 or kappa_target > math.sqrt(n):
            raise GenerationError(f"kappa_target must lie in [1, sqrt(n)], got {kappa_target}")
        phi = _localize(_sign_basis(n, r, gen_l), float(kappa_target), gen_l)
        psi = _sign_basis(m, r, gen_r)
    homogeneous = vector_mode == "uniform-sign" and r == 1
    return GroundTruth(n, m, nu, phi, psi, homogeneous, vector_mode)


def _kron_all(vectors) -> np.ndarray:
    return reduce(np.kron, vectors)


def unfold_tensor_cp(n, k_order, factors, weights) -> GroundTruth:
    """Unfolding (first mode vs the rest) of an odd-order CP tensor, with its SVD.

    ``factors`` holds one tuple of ``k_order`` length-n unit vectors per
    component. Non-orthogonal factors are handled through the r x r Gram
    matrices of the left factors and of the Kronecker right factors.
    """
    n, k_order = int(n), int(k_order)
    if k_order < 3 or k_order % 2 == 0:
        raise GenerationError(f"k_order must be odd and >= 3, got {k_order}")
    weights = np.asarray(weights, dtype=float).ravel()
    factors = tuple(tuple(np.asarray(f, dtype=float) for f in comp) for comp in factors)
    r = len(factors)
    if weights.size != r:
        raise GenerationError("one weight per CP component required")
    for comp in factors:
        if len(comp) != k_order:
            raise GenerationError(f"each component needs {k_order} factors")
        for f in comp:
            if f.shape != (n,) or abs(np.linalg.norm(f) - 1.0) > 1e-10:
                raise GenerationError("CP factors must be unit vectors of length n")
    m = n ** (k_order - 1)
    left = np.column_stack([comp[0] for comp in factors])  # n x r
    gram_right = np.ones((r, r))
    for mode in range(1, k_order):
        fm = np.column_stack([comp[mode] for comp in factors])
        gram_right *= fm.T @ fm
    q1, r1 = np.linalg.qr(left)
    try:
        chol = np.linalg.cholesky(gram_right)  # gram = L L^T
    except np.linalg.LinAlgError as exc:
        raise GenerationError("Kronecker right factors are linearly dependent") from exc
    core = r1 @ np.diag(weights) @ chol
    uc, s, vct = np.linalg.svd(core)
    keep = s > 1e-12 * s[0]
    uc, s, vct = uc[:, keep], s[keep], vct[keep]
    phi = (q1 @ uc).T
    # right singular vectors: Vcp @ L^{-T} @ Vc
    coef = np.linalg.solve(chol.T, vct.T)  # r x r'
    psi = np.zeros((s.size, m))
    for i, comp in enumerate(factors):
        psi += np.outer(coef[i], _kron_all(comp[1:]))
    # fix sign so that phi has a positive largest entry
    for i in range(s.size):
        j = int(np.argmax(np.abs(phi[i])))
        if phi[i, j] < 0:
            phi[i] *= -1
            psi[i] *= -1
    cp = CPFactors(k_order, weights, factors)
    return GroundTruth(n, m, s, phi, psi, False, "cp-unfolding", cp)


@dataclass(frozen=True)
class SampleSpec:
    d: float
    seed: int = 0
    mode: str = "exact-Bernoulli"


def sample_observed(gt: GroundTruth, spec: SampleSpec, cap: int = DEFAULT_NNZ_CAP) -> ObservedMatrix:
    """Bernoulli(d/sqrt(nm)) mask applied to M, rescaled by sqrt(nm)/d.

    exact-Bernoulli draws a Binomial(m, p) count per row, then that many
    distinct columns uniformly; row x uses stream ``(seed, 1, x)``.
    fixed-count draws exactly round(d sqrt(nm)) distinct positions.
    """
    n, m, d = gt.n, gt.m, float(spec.d)
    root = math.sqrt(n * m)
    p = d / root
    if not 0.0 < p < 1.0:
        raise GenerationError(f"sampling probability {p} outside (0, 1)")
    expected = d * root
    if expected > cap:
        raise GenerationError(f"expected number of samples {expected:.0f} exceeds cap {cap}")
    if spec.mode == "exact-Bernoulli":
        rows, cols = [], []
        for x in range(n):
            g = stream(spec.seed, 1, x)
            c = int(g.binomial(m, p))
            if c:
                ys = np.sort(g.choice(m, size=c, replace=False))
                cols.append(ys)
                rows.append(np.full(c, x, dtype=np.int64))
        rows = np.concatenate(rows) if rows else np.zeros(0, dtype=np.int64)
        cols = np.concatenate(cols) if cols else np.zeros(0, dtype=np.int64)
    elif spec.mode == "fixed-count":
        g = stream(spec.seed, 2)
        pos = np.sort(g.choice(n * m, size=int(round(expected)), replace=False))
        rows, cols = pos // m, pos % m
    else:
        raise GenerationError(f"unknown sampler mode {spec.mode!r}")
    vals = gt.entries(rows, cols) if rows.size else np.zeros(0)
    return ingest_arrays(n, m, d, rows, cols, vals, pre_scaled=False)


def homogeneity_deviation(gt: GroundTruth, rho: float) -> float:
    """max_x |D_x - rho^2| / rho^2 with D = Phi @ 1."""
    from .estimator import VarianceOperator

    D = VarianceOperator(gt).phi_apply(np.ones(gt.n))
    return float(np.abs(D - rho**2).max() / rho**2)


def _fmt(v) -> str:
    return " ".join(f"{x:.17g}" for x in np.asarray(v, dtype=float).ravel())


def write_ground_truth(gt: GroundTruth, path) -> None:
    """Header ``n m r``, nu line, r phi lines, then r psi lines or a CP block."""
    with open(path, "w") as fh:
        fh.write(f"{gt.n} {gt.m} {gt.r}\n")
        fh.write(_fmt(gt.nu) + "\n")
        for row in gt.phi:
            fh.write(_fmt(row) + "\n")
        if gt.cp is None:
            for row in gt.psi:
                fh.write(_fmt(row) + "\n")
        else:
            fh.write(f"implicit-kron {gt.cp.k_order} {len(gt.cp.factors)}\n")
            fh.write(_fmt(gt.cp.weights) + "\n")
            for comp in gt.cp.factors:
                for f in comp:
                    fh.write(_fmt(f) + "\n")


def read_ground_truth(path) -> GroundTruth:
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip() and not ln.startswith("#")]
    n, m, r = (int(t) for t in lines[0].split())
    nu = np.array(lines[1].split(), dtype=float)
    phi = np.array([ln.split() for ln in lines[2:2 + r]], dtype=float)
    rest = lines[2 + r:]
    if rest and rest[0].startswith("implicit-kron"):
        _, k_order, r_cp = rest[0].split()
        k_order, r_cp = int(k_order), int(r_cp)
        weights = np.array(rest[1].split(), dtype=float)
        vecs = [np.array(ln.split(), dtype=float) for ln in rest[2:2 + r_cp * k_order]]
        factors = [tuple(vecs[i * k_order:(i + 1) * k_order]) for i in range(r_cp)]
        gt = unfold_tensor_cp(n, k_order, factors, weights)
        if gt.m != m or not np.allclose(gt.nu, nu, rtol=1e-12, atol=0):
            raise GenerationError(f"{path}: CP block inconsistent with header/singular values")
        return gt
    psi = np.array([ln.split() for ln in rest[:r]], dtype=float)
    homogeneous = r == 1 and np.allclose(np.abs(phi), 1 / math.sqrt(n)) and np.allclose(np.abs(psi), 1 / math.sqrt(m))
    mode = "uniform-sign" if homogeneous else "random-orthonormal"
    return GroundTruth(n, m, nu, phi, psi, homogeneous, mode)
