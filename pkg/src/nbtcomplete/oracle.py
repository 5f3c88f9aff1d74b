"""Brute-force references used to cross-check the fast code paths."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import schur
from .nbt_operator import DENSE_CAP, TwoPathSet, apply_J_delta, apply_T, B_operator, dense_B
from .rng import stream
from .spectral import power_apply, sort_order
from .synth import GroundTruth

NODE_CAP = 10**6
GW_STREAM = 0x4757


class OracleSizeError(ValueError):
    pass


class PartialTreeError(RuntimeError):
    def __init__(self, msg, tree=None):
        super().__init__(msg)
        self.tree = tree


def dense_spectrum(tp: TwoPathSet, cap: int = DENSE_CAP) -> np.ndarray:
    """All eigenvalues of the dense B, sorted by modulus (ties as in the solver)."""
    if len(tp) > cap:
        raise OracleSizeError(f"|E| = {len(tp)} exceeds dense cap {cap}")
    w = schur.eigvals(dense_B(tp, cap))
    return w[sort_order(w)]


def brute_gamma(gt: GroundTruth, d: float, t: int, i: int, j: int, cap: int = 10**6) -> float:
    """Gamma^(t)_ij with Q and Phi formed explicitly and powers taken one by one."""
    n, m = gt.n, gt.m
    if n * m > cap:
        raise OracleSizeError(f"n*m = {n * m} exceeds {cap}")
    M = np.zeros((n, m))
    for k in range(gt.r):
        M += gt.nu[k] * np.outer(gt.phi[k], gt.psi[k])
    Q = math.sqrt(n * m) * M * M
    Phi = Q @ Q.T
    h = gt.phi[i] * gt.phi[j]
    denom = (gt.nu[i] * gt.nu[j] * d) ** 2
    total = 0.0
    P = np.eye(n)
    for s in range(t + 1):
        total += float(np.sum(P @ h)) / denom**s
        P = P @ Phi
    return total


@dataclass
class GWTree:
    """Bipartite Galton-Watson tree in breadth-first order.

    Node 0 is the root. Even depths carry left labels in ``[n]``, odd
    depths right labels in ``[m]``; ``parent[0] == -1``.
    """

    depth: np.ndarray
    label: np.ndarray
    parent: np.ndarray
    max_depth: int

    def __len__(self):
        return self.label.size

    @property
    def root_label(self) -> int:
        return int(self.label[0])

    def children_count(self) -> np.ndarray:
        return np.bincount(self.parent[1:], minlength=len(self))

    def level(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.depth == k)


def sample_gw_tree(gt: GroundTruth, d: float, depth: int, root_label: int, seed: int,
                   node_cap: int = NODE_CAP, gen: np.random.Generator | None = None) -> GWTree:
    """Poisson(d^2) children at even depth, exactly one child at odd depth, i.i.d. labels."""
    if depth < 0:
        raise ValueError("depth must be >= 0")
    if gen is None:
        gen = stream(seed, GW_STREAM)
    depths = [np.zeros(1, dtype=np.int64)]
    labels = [np.array([root_label], dtype=np.int64)]
    parents = [np.array([-1], dtype=np.int64)]
    frontier = np.zeros(1, dtype=np.int64)
    total = 1
    for k in range(depth):
        if k % 2 == 0:
            counts = gen.poisson(d * d, size=frontier.size)
            m_or_n = gt.m
        else:
            counts = np.ones(frontier.size, dtype=np.int64)
            m_or_n = gt.n
        par = np.repeat(frontier, counts)
        lab = gen.integers(0, m_or_n, size=par.size)
        new = np.arange(total, total + par.size, dtype=np.int64)
        total += par.size
        depths.append(np.full(par.size, k + 1, dtype=np.int64))
        labels.append(lab)
        parents.append(par)
        frontier = new
        if total > node_cap:
            tree = GWTree(np.concatenate(depths), np.concatenate(labels), np.concatenate(parents), k + 1)
            raise PartialTreeError(f"tree exceeded {node_cap} nodes at depth {k + 1}", tree)
        if frontier.size == 0:
            break
    return GWTree(np.concatenate(depths), np.concatenate(labels), np.concatenate(parents), depth)


def tree_functional(tree: GWTree, gt: GroundTruth, phi_index, t: int, d: float) -> np.ndarray | float:
    """``f_{phi,t}`` at the root: prefactor ``(mn/d^2)^t`` times the sum over descending paths
    of length ``2t`` of ``prod M[x_{s-1}, y_s] M[x_s, y_s]`` times ``phi(x_t)``.

    ``phi_index`` may be an int or a sequence; a sequence returns one value per index.
    """
    if tree.max_depth < 2 * t:
        raise ValueError(f"tree depth {tree.max_depth} < 2t = {2 * t}")
    scalar = np.isscalar(phi_index)
    idx = [int(phi_index)] if scalar else [int(i) for i in phi_index]
    c = gt.n * gt.m / (d * d)
    N = len(tree)
    vals = np.zeros((len(idx), N))
    leaf = tree.depth == 2 * t
    vals[:, leaf] = gt.phi[np.ix_(idx, tree.label[leaf])]
    for k in range(2 * t - 1, -1, -1):
        lev = tree.level(k + 1)
        par = tree.parent[lev]
        if k % 2 == 0:
            # even node: sum over right children, times the prefactor
            for a in range(len(idx)):
                vals[a] += c * np.bincount(par, weights=vals[a, lev], minlength=N)
        else:
            # odd node y with single child x': M[x, y] M[x', y] val(x')
            gp = tree.parent[par]
            w = gt.entries(tree.label[gp], tree.label[par]) * gt.entries(tree.label[lev], tree.label[par])
            for a in range(len(idx)):
                vals[a] += np.bincount(par, weights=w * vals[a, lev], minlength=N)
    out = vals[:, 0]
    return float(out[0]) if scalar else out


@dataclass
class MCResult:
    mean: float
    se: float
    target: float
    samples: int

    @property
    def z(self) -> float:
        if self.se == 0.0:
            return 0.0 if self.mean == self.target else math.inf
        return (self.mean - self.target) / self.se

    def within(self, k: float = 3.0) -> bool:
        if self.se == 0.0:
            return math.isclose(self.mean, self.target, rel_tol=1e-12, abs_tol=1e-15)
        return abs(self.z) <= k


def _mean_se(x: np.ndarray) -> tuple[float, float]:
    n = x.size
    mean = math.fsum(x) / n
    var = math.fsum((x - mean) ** 2) / (n - 1)
    return mean, math.sqrt(var / n)


def functional_samples(gt: GroundTruth, d: float, root: int, t_max: int, samples: int, seed: int) -> np.ndarray:
    """Values ``f_{phi_i,t}`` for all i and ``t <= t_max``; shape ``(t_max+1, r, samples)``.

    Tree ``s`` uses its own stream ``(seed, GW, s)`` so the set of trees
    does not depend on how the trials are scheduled.
    """
    out = np.zeros((t_max + 1, gt.r, samples))
    idx = list(range(gt.r))
    for s in range(samples):
        tree = sample_gw_tree(gt, d, 2 * t_max, root, seed, gen=stream(seed, GW_STREAM, s))
        for t in range(t_max + 1):
            out[t, :, s] = tree_functional(tree, gt, idx, t, d)
    return out


def functional_targets(gt: GroundTruth, d: float, root: int, t: int, i: int, j: int) -> tuple[float, float]:
    """Closed forms ``nu_i^{2t} phi_i(x)`` and ``(nu_i nu_j)^{2t} [sum_s Phi^s/(nu_i nu_j d)^{2s} (phi_i o phi_j)](x)``."""
    from .estimator import VarianceOperator

    first = gt.nu[i] ** (2 * t) * gt.phi[i, root]
    var = VarianceOperator(gt)
    h = gt.phi[i] * gt.phi[j]
    scale = (gt.nu[i] * gt.nu[j] * d) ** 2
    acc = h.copy()
    for _ in range(t):
        h = var.phi_apply(h) / scale
        acc += h
    second = (gt.nu[i] * gt.nu[j]) ** (2 * t) * acc[root]
    return float(first), float(second)


def check_functional_moments(gt: GroundTruth, d: float, root: int, t_values=(0, 1, 2),
                             samples: int = 10_000, seed: int = 0) -> list[dict]:
    vals = functional_samples(gt, d, root, max(t_values), samples, seed)
    rows = []
    for t in t_values:
        for i in range(gt.r):
            target, _ = functional_targets(gt, d, root, t, i, i)
            mean, se = _mean_se(vals[t, i])
            rows.append({"kind": "mean", "t": t, "i": i, "j": i, **vars(MCResult(mean, se, target, samples))})
        for i in range(gt.r):
            for j in range(i, gt.r):
                _, target = functional_targets(gt, d, root, t, i, j)
                mean, se = _mean_se(vals[t, i] * vals[t, j])
                rows.append({"kind": "product", "t": t, "i": i, "j": j, **vars(MCResult(mean, se, target, samples))})
    for row in rows:
        res = MCResult(row["mean"], row["se"], row["target"], samples)
        row["z"] = res.z
        row["ok"] = res.within(3.0)
    return rows


def poisson_chi2(counts: np.ndarray, lam: float, min_expected: float = 5.0) -> tuple[float, float]:
    """Chi-square goodness of fit of integer counts to Poisson(lam); returns (statistic, p-value)."""
    from scipy import stats

    counts = np.asarray(counts)
    N = counts.size
    kmax = int(counts.max()) + 1
    probs = stats.poisson.pmf(np.arange(kmax), lam)
    obs = np.bincount(counts, minlength=kmax).astype(float)
    # merge sparse tails into neighbouring bins
    edges, ob, ex = [], [], []
    acc_o = acc_e = 0.0
    for k in range(kmax):
        acc_o += obs[k]
        acc_e += probs[k] * N
        if acc_e >= min_expected:
            ob.append(acc_o)
            ex.append(acc_e)
            acc_o = acc_e = 0.0
    tail_e = N - sum(ex)
    tail_o = N - sum(ob)
    if tail_e < min_expected and ex:
        ex[-1] += tail_e
        ob[-1] += tail_o
    else:
        ex.append(tail_e)
        ob.append(tail_o)
    ob, ex = np.array(ob), np.array(ex)
    stat = float(np.sum((ob - ex) ** 2 / ex))
    return stat, float(stats.chi2.sf(stat, ob.size - 1))


@dataclass
class PseudoEigenReport:
    ell: int
    UU: np.ndarray
    UhUh: np.ndarray
    UUh: np.ndarray
    UhBU: np.ndarray
    target_UU: np.ndarray
    target_UhUh: np.ndarray
    target_UUh: np.ndarray
    target_UhBU: np.ndarray
    deviations: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in vars(self).items()}


def _rel_dev(a: np.ndarray, b: np.ndarray) -> float:
    nb = float(np.linalg.norm(b))
    diff = float(np.linalg.norm(a - b))
    return diff / nb if nb > 0 else diff


def pseudo_eigen_grams(tp: TwoPathSet, gt: GroundTruth, params, d: float, ell: int | None = None) -> PseudoEigenReport:
    """Grams of ``u_i = B^l chi_i / nu_i^{2l}`` and ``uh_i = (B^T)^l J_delta chi_i / nu_i^{2l+2}``.

    ``chi_i = T phi_i``. Targets: ``U*U ~ d^2 Gamma^(l)``, ``Uh*Uh ~ Gamma^(l+1) - I``,
    ``U*Uh ~ I``, ``Uh* B^l U ~ diag(nu^2)^l``.
    """
    from .estimator import compute_gamma_matrix

    r0 = params.r0
    if r0 < 1:
        raise ValueError("no outliers in scope (r0 = 0)")
    if np.any(gt.nu[:r0] <= 0):
        raise ValueError("zero singular value in scope")
    ell = params.ell if ell is None else int(ell)
    Bop, BTop = B_operator(tp), B_operator(tp, transpose=True)
    N = len(tp)
    U = np.zeros((N, r0))
    Uh = np.zeros((N, r0))
    for i in range(r0):
        lognu = math.log(gt.nu[i])
        chi = apply_T(tp, gt.phi[i])
        w, ls = power_apply(Bop, chi, ell)
        U[:, i] = w * math.exp(ls - 2 * ell * lognu) if np.isfinite(ls) else 0.0
        w, ls = power_apply(BTop, apply_J_delta(tp, chi), ell)
        Uh[:, i] = w * math.exp(ls - (2 * ell + 2) * lognu) if np.isfinite(ls) else 0.0
    BU = U.copy()
    for _ in range(ell):
        BU = np.column_stack([Bop(BU[:, i]) for i in range(r0)])
    nu = gt.nu[:r0]
    g_l = compute_gamma_matrix(gt, d, ell, range(r0)).values
    g_l1 = compute_gamma_matrix(gt, d, ell + 1, range(r0)).values
    rep = PseudoEigenReport(
        ell=ell,
        UU=U.T @ U,
        UhUh=Uh.T @ Uh,
        UUh=U.T @ Uh,
        UhBU=Uh.T @ BU,
        target_UU=d * d * g_l,
        target_UhUh=g_l1 - np.eye(r0),
        target_UUh=np.eye(r0),
        target_UhBU=np.diag(nu ** (2 * ell)),
    )
    rep.deviations = {
        "UU": _rel_dev(rep.UU, rep.target_UU),
        "UhUh": _rel_dev(rep.UhUh, rep.target_UhUh),
        "UUh": _rel_dev(rep.UUh, rep.target_UUh),
        "UhBU": _rel_dev(rep.UhBU, rep.target_UhBU),
    }
    return rep
