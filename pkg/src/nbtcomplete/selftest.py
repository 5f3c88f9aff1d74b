"""Small exact checks runnable from the command line (``--mode selftest``).

Each check returns ``(ok, detail)``. They are also collected by the test suite.
"""

from __future__ import annotations

import math
import traceback

import numpy as np
from scipy import stats

from . import estimator as est
from . import oracle
from .baseline import truncated_svd_baseline
from .nbt_operator import (
    B_operator, apply_B, apply_B_transpose, apply_J_delta, apply_S, apply_S_delta, apply_T,
    dense_B, enumerate_two_paths, verify_relations,
)
from .rng import stream, unit_sphere
from .sparse_core import (
    ObservationError, build_graph, ingest, ingest_arrays, neighborhood_excess, prune_degree_one,
    tangle_free_check,
)
from .spectral import EigenPair, arnoldi_topk, classify_spectrum, power_apply
from .synth import SampleSpec, gen_rank_r, sample_observed, unfold_tensor_cp

CHECKS = []


def check(fn):
    CHECKS.append(fn)
    return fn


def tp_from(n, m, entries, d=1.5):
    obs = ingest(n, m, d, entries, pre_scaled=True)
    return enumerate_two_paths(prune_degree_one(build_graph(obs)), obs), obs


def two_triple(a=2.0):
    return tp_from(2, 2, [(0, 0, a), (1, 0, a)])


def four_cycle():
    return tp_from(2, 2, [(0, 0, 1.0), (1, 0, 1.0), (1, 1, 1.0), (0, 1, 1.0)])


def random_instance(n=12, m=30, d=3.0, seed=0, r=2, mode="random-orthonormal"):
    gt = gen_rank_r(n, m, r, np.linspace(1.0, 0.6, r), mode, seed)
    obs = sample_observed(gt, SampleSpec(d, seed))
    return gt, obs, enumerate_two_paths(prune_degree_one(build_graph(obs)), obs)


def _rel(a, b):
    nb = np.linalg.norm(b)
    return np.linalg.norm(np.asarray(a) - np.asarray(b)) / (nb if nb > 0 else 1.0)


# sparse_core

@check
def ingest_scaling():
    obs = ingest(2, 2, 1.5, [(0, 0, 1.0)])
    return math.isclose(obs.values[0], 4 / 3, rel_tol=1e-15), f"{obs.values[0]!r}"


@check
def ingest_empty():
    obs = ingest(3, 5, 2.0, [])
    return obs.nnz == 0, "empty sample"


@check
def ingest_rejects_p_above_one():
    try:
        ingest(3, 3, 3.1, [(0, 0, 1.0)])
    except ObservationError as exc:
        return True, str(exc)
    return False, "accepted p > 1"


@check
def graph_right_adjacency():
    obs = ingest(2, 2, 1.5, [(0, 0, 2.0), (1, 0, 3.0)], pre_scaled=True)
    adj = build_graph(obs).right_adjacency(0)
    return adj == [(0, 2.0), (1, 3.0)], str(adj)


@check
def graph_transpose_consistent():
    _, obs, _ = random_instance(20, 40, 4.0, seed=3)
    return build_graph(obs).transpose_consistent(), f"{obs.nnz} edges"


@check
def prune_single_edge():
    obs = ingest(2, 2, 1.5, [(0, 0, 1.0)])
    g = prune_degree_one(build_graph(obs))
    return g.m == 0 and g.n_edges == 0, f"m={g.m}"


@check
def prune_keeps_degree_two():
    obs = ingest(2, 2, 1.5, [(0, 0, 1.0), (1, 0, 1.0)])
    g = prune_degree_one(build_graph(obs))
    return g.m == 1 and g.n_edges == 2 and list(g.right_index) == [0], f"m={g.m}"


@check
def prune_binomial_tail():
    n, m, d = 100, 10_000, 4.0
    gt = gen_rank_r(n, m, 1, [1.0], "uniform-sign", seed=1)
    g = prune_degree_one(build_graph(sample_observed(gt, SampleSpec(d, 1))))
    q = stats.binom.sf(1, n, d / math.sqrt(n * m))
    z = (g.m - m * q) / math.sqrt(m * q * (1 - q))
    return abs(z) <= 3.0, f"retained {g.m}, expected {m * q:.1f}, z={z:.2f}"


@check
def tangle_free_examples():
    tree = ingest(3, 3, 1.5, [(0, 0, 1.0), (1, 0, 1.0), (1, 1, 1.0), (2, 1, 1.0)])
    cyc = ingest(2, 2, 1.5, [(0, 0, 1.0), (1, 0, 1.0), (1, 1, 1.0), (0, 1, 1.0)])
    two = ingest(3, 4, 1.5, [(0, 0, 1.0), (1, 0, 1.0), (1, 1, 1.0), (0, 1, 1.0),
                             (0, 2, 1.0), (2, 2, 1.0), (2, 3, 1.0), (0, 3, 1.0)])
    ex = (neighborhood_excess(build_graph(tree), 0, 4), neighborhood_excess(build_graph(cyc), 0, 2),
          neighborhood_excess(build_graph(two), 0, 6))
    flags = (tangle_free_check(build_graph(tree), 4)[1], tangle_free_check(build_graph(cyc), 2)[1],
             tangle_free_check(build_graph(two), 6)[1])
    return ex == (0, 1, 2) and flags == (True, True, False), f"excess {ex}"


# nbt_operator

@check
def two_paths_two_triple():
    tp, _ = two_triple()
    ok = [tuple(p) for p in tp.paths] == [(0, 0, 1), (1, 0, 0)] and list(tp.inverse) == [1, 0]
    return ok, str(tp.paths.tolist())


@check
def two_paths_single_edge():
    tp, _ = tp_from(2, 2, [(0, 0, 1.0)])
    return len(tp) == 0, f"{len(tp)} paths"


@check
def two_paths_degree_three():
    tp, _ = tp_from(3, 3, [(0, 0, 1.0), (1, 0, 1.0), (2, 0, 1.0)])
    return len(tp) == 6, f"{len(tp)} paths"


@check
def apply_B_single_transition():
    a = 1.7
    tp, _ = tp_from(3, 3, [(0, 0, a), (1, 0, a), (1, 1, a), (2, 1, a)])
    idx = {tuple(p): k for k, p in enumerate(tp.paths.tolist())}
    v = np.zeros(len(tp))
    v[idx[(1, 1, 2)]] = 1.0
    want = np.zeros(len(tp))
    want[idx[(0, 0, 1)]] = a * a
    return np.array_equal(apply_B(tp, v), want), "indicator propagation"


@check
def apply_B_zero():
    _, _, tp = random_instance()
    z = np.zeros(len(tp))
    return not apply_B(tp, z).any() and not apply_B_transpose(tp, z).any(), "zero in, zero out"


@check
def apply_B_matches_dense():
    worst = 0.0
    for seed in range(5):
        _, _, tp = random_instance(10, 20, 2.5, seed)
        if not 0 < len(tp) <= 200:
            continue
        D = dense_B(tp)
        v = unit_sphere(stream(seed, 5), len(tp))
        worst = max(worst, _rel(apply_B(tp, v), D @ v), _rel(apply_B_transpose(tp, v), D.T @ v))
    return worst <= 1e-12, f"max rel err {worst:.2e}"


@check
def adjoint_identity():
    _, _, tp = random_instance(15, 40, 3.0, 7)
    worst = 0.0
    for k in range(100):
        g = stream(7, 6, k)
        u, v = g.standard_normal(len(tp)), g.standard_normal(len(tp))
        lhs, rhs = apply_B(tp, u) @ v, u @ apply_B_transpose(tp, v)
        worst = max(worst, abs(lhs - rhs) / max(1.0, abs(lhs)))
    return worst <= 1e-12, f"max err {worst:.2e}"


@check
def start_terminal_two_triple():
    tp, _ = two_triple()
    w = np.array([3.0, 5.0])
    return apply_S(tp, apply_T(tp, w))[0] == 5.0, "S T w at x0 equals w(x1)"


@check
def chi_check_two_triple():
    a = 2.0
    tp, _ = two_triple(a)
    phi = np.array([0.6, -0.8])
    chk = apply_J_delta(tp, apply_T(tp, phi))
    return np.allclose(chk, a * a * phi[tp.e1], rtol=0, atol=0), str(chk)


@check
def start_terminal_gives_AAt_offdiag():
    _, obs, tp = random_instance(12, 30, 3.0, 2)
    A = obs.to_csr().toarray()
    AA = A @ A.T
    off = AA - np.diag(np.diag(AA))
    w = stream(2, 8).standard_normal(obs.n)
    lhs = apply_S(tp, tp.delta * apply_T(tp, w))  # S T_delta w
    lhs2 = apply_S_delta(tp, apply_T(tp, w))
    return max(_rel(lhs, off @ w), _rel(lhs2, off @ w)) <= 1e-12, "S T_delta = AA^T - diag(AA^T)"


@check
def relations_exact_forms():
    _, _, tp = random_instance(30, 300, 3.0, 4)
    rep = verify_relations(tp, trials=50, seed=4)
    bound = 1e-10 * max(1.0, rep["delta_max"])
    tp4, _ = four_cycle()
    rep4 = verify_relations(tp4, trials=5)
    empty, _ = tp_from(2, 2, [(0, 0, 1.0)])
    rep0 = verify_relations(empty)
    ok = (rep["general_form"] <= bound and rep["parity_time"] <= bound and rep["direct_vs_factored"] <= bound
          and rep4["degree2_form"] <= 1e-12 and rep0["parity_time"] == 0.0 and rep0["degree2_form"] == 0.0)
    return ok, f"general {rep['general_form']:.1e}, PT {rep['parity_time']:.1e}, 4-cycle {rep4['degree2_form']:.1e}"


@check
def dense_B_small_cases():
    tp4, _ = four_cycle()
    w = np.sort_complex(oracle.dense_spectrum(tp4))
    tp2, _ = two_triple()
    ok = np.allclose(w, [-1, -1, 1, 1], atol=1e-12) and not dense_B(tp2).any()
    cols = all(np.array_equal(dense_B(tp4)[:, j], apply_B(tp4, np.eye(4)[j])) for j in range(4))
    return ok and cols, str(w)


# spectral

@check
def arnoldi_diagonal():
    D = np.array([3.0, 2.0, 1.0])
    res = arnoldi_topk(lambda v: D * v, 3, 1, krylov_dim=3)
    p = res[0]
    return abs(p.lam - 3) <= 1e-12 and p.residual <= 1e-8, f"{p.lam}"


@check
def arnoldi_four_cycle():
    tp4, _ = four_cycle()
    res = arnoldi_topk(B_operator(tp4), 4, 4, krylov_dim=4)
    w = np.sort([p.lam.real for p in res])
    return np.allclose(w, [-1, -1, 1, 1], atol=1e-10), str(w)


@check
def arnoldi_vs_dense():
    worst = 0.0
    for seed in range(3):
        _, _, tp = random_instance(12, 40, 3.0, seed)
        if not 10 <= len(tp) <= 500:
            continue
        ref = oracle.dense_spectrum(tp)[:5]
        got = np.array([p.lam for p in arnoldi_topk(B_operator(tp), len(tp), 5, seed=seed)])[:5]
        worst = max(worst, match_error(got, ref))
    return worst <= 1e-8, f"max rel err {worst:.2e}"


def match_error(got, ref):
    """Max relative error after greedy nearest matching (multiplicity-aware)."""
    got = list(got)
    scale = max(1.0, float(np.abs(ref).max()) if len(ref) else 1.0)
    worst = 0.0
    for lam in ref:
        if not got:
            return math.inf
        j = int(np.argmin([abs(g - lam) for g in got]))
        worst = max(worst, abs(got.pop(j) - lam) / scale)
    return worst


@check
def classify_examples():
    pairs = [EigenPair(4.0, np.ones(1), 0.0), EigenPair(0.2, np.ones(1), 0.0)]
    s = classify_spectrum(pairs, 1, 0.5)
    s0 = classify_spectrum(pairs, 0, 0.5)
    ok = (len(s.outliers) == 1 and s.bulk_radius == 0.2 and math.isclose(s.bulk_ratio, 0.8)
          and not s0.outliers and len(s0.bulk) == 2)
    return ok, f"ratio {s.bulk_ratio}"


@check
def power_apply_examples():
    _, _, tp = random_instance(12, 40, 3.0, 1)
    v = stream(1, 9).standard_normal(len(tp))
    w0, s0 = power_apply(B_operator(tp), v, 0)
    ok0 = np.allclose(w0 * math.exp(s0), v, rtol=1e-14)
    w1, s1 = power_apply(B_operator(tp), v, 1)
    w11, s11 = power_apply(B_operator(tp), w1, 1)
    w2, s2 = power_apply(B_operator(tp), v, 2)
    ok = _rel(w11 * math.exp(s1 + s11), w2 * math.exp(s2)) <= 1e-10
    return ok0 and ok, "associativity"


# estimator

@check
def params_uniform_rank_one():
    nu, d = 1.7, 3.0
    gt = gen_rank_r(64, 4096, 1, [nu], "uniform-sign", seed=0)
    p = est.compute_params(gt, d)
    want = dict(rho=nu**2, L=nu, K=1.0, kappa=1.0, theta1=nu / math.sqrt(d), theta2=nu / d, theta=nu / math.sqrt(d), eta=1.0)
    ok = all(math.isclose(getattr(p, k), v, rel_tol=1e-10) for k, v in want.items())
    return ok and p.r0 == 1 and math.isclose(p.tau[0], 1 / math.sqrt(d), rel_tol=1e-10), f"rho {p.rho!r}"


@check
def eta_tensor_unfolding():
    n = 6
    g = stream(0, 10)
    gt = unfold_tensor_cp(n, 3, [tuple(unit_sphere(g, n) for _ in range(3))], [2.0])
    p = est.compute_params(gt, 2.0)
    return math.isclose(p.eta, 1.0, rel_tol=1e-12) and gt.m == 36, f"eta {p.eta!r}"


@check
def rho_vs_dense_norm():
    gt = gen_rank_r(20, 60, 3, [1.0, 0.8, 0.5], "random-orthonormal", seed=5)
    p = est.compute_params(gt, 3.0)
    ref = np.linalg.norm(est.VarianceOperator(gt).dense_Q(), 2)
    return abs(p.rho - ref) <= 1e-8 * ref, f"{p.rho!r} vs {ref!r}"


@check
def inequalities_hold():
    gt = gen_rank_r(32, 1024, 1, [1.0], "uniform-sign", seed=0)
    rep = est.check_parameter_inequalities(est.compute_params(gt, 2.0), gt)
    tight = [c for c in rep["checks"] if c["name"].startswith("max Phi_xy")][0]
    gt2 = gen_rank_r(50, 2500, 2, [1.0, 0.7], "random-orthonormal", seed=1)
    rep2 = est.check_parameter_inequalities(est.compute_params(gt2, 2.0), gt2)
    return rep["violations"] == 0 and abs(tight["slack"]) <= 1e-12 and rep2["violations"] == 0, \
        f"min slack {min(c['slack'] for c in rep2['checks']):.3g}"


@check
def singular_value_clamp():
    pairs = [EigenPair(4.0 + 0j, np.ones(1), 0.0), EigenPair(-0.3 + 0j, np.ones(1), 0.0)]
    nu, sus = est.estimate_singular_values(classify_spectrum(pairs, 2, 0.1))
    return list(nu) == [2.0, 0.0] and list(sus) == [False, True], str(nu)


@check
def left_vectors_two_triple():
    a = 1.5
    tp, _ = two_triple(a)
    xi = np.array([1.0, 0.0])
    pair = EigenPair(0.0, xi, 0.0, left_vec=xi)
    zr, zl, *_ = est.extract_left_vectors(tp, [pair])
    zero = EigenPair(0.0, np.zeros(2), 0.0, left_vec=np.zeros(2))
    zr0, zl0, *_ = est.extract_left_vectors(tp, [zero])
    ok = np.array_equal(zr[0], [a * a, 0]) and np.array_equal(zl[0], [1, 0]) and not zr0[0].any() and not zl0[0].any()
    return ok, f"{zr[0]} {zl[0]}"


@check
def gamma_examples():
    gt = gen_rank_r(16, 256, 1, [1.0], "uniform-sign", seed=0)
    g = est.compute_gamma_matrix(gt, 2.0, 2).values[0, 0]
    b = oracle.brute_gamma(gt, 2.0, 2, 0, 0)
    gt2 = gen_rank_r(40, 400, 2, [1.0, 0.6], "random-orthonormal", seed=2)
    G0 = est.compute_gamma_matrix(gt2, 2.0, 0).values
    G4 = est.compute_gamma_matrix(gt2, 2.0, 4).values
    B4 = np.array([[oracle.brute_gamma(gt2, 2.0, 4, i, j) for j in range(2)] for i in range(2)])
    ok = (math.isclose(g, 1.3125, rel_tol=1e-12) and math.isclose(b, 1.3125, rel_tol=1e-12)
          and np.allclose(G0, np.eye(2), atol=1e-12) and np.abs(G4 - B4).max() <= 1e-10 * np.abs(B4).max())
    return ok, f"uniform {g!r}"


@check
def predict_gamma_examples():
    d = 4.0
    gt = gen_rank_r(16, 256, 1, [1.0], "uniform-sign", seed=0)
    pr = est.predict_gamma(gt, d, 0)
    big = est.predict_gamma(gt, 1e6, 0)  # tau -> 0
    gt2 = gen_rank_r(30, 300, 2, [1.0, 0.8], "random-orthonormal", seed=3)
    d2 = 8.0
    pr2 = est.predict_gamma(gt2, d2, 1)
    var = est.VarianceOperator(gt2)
    Q = var.dense_Q()
    h = gt2.phi[1] ** 2
    ref = np.linalg.solve(np.eye(30) - Q @ Q.T / (gt2.nu[1] ** 4 * d2 * d2), h).sum()
    ok = (math.isclose(pr.gamma, 1 / (1 - d**-2), rel_tol=1e-12) and math.isclose(pr.homogeneous_gamma, pr.gamma, rel_tol=1e-12)
          and math.isclose(pr.overlap, math.sqrt(1 - d**-2), rel_tol=1e-12) and abs(big.gamma - 1) < 1e-6
          and abs(pr2.gamma - ref) <= 1e-9 * ref)
    return ok, f"gamma {pr.gamma!r}"


@check
def evaluate_extremes():
    gt = gen_rank_r(8, 64, 2, [1.0, 0.5], "random-orthonormal", seed=0)
    p = est.compute_params(gt, 1.5)
    mk = lambda v: est.RecoveryEstimate([1.0 + 0j], np.array([1.0]), np.array([False]), [v], [v], [v / np.linalg.norm(v)],
                                        [v / np.linalg.norm(v)], [np.linalg.norm(v)], [0.0], [v / np.linalg.norm(v)])
    good = est.evaluate_recovery(mk(-3.0 * gt.phi[0]), gt, p)["outliers"][0]["overlap_R"]
    bad = est.evaluate_recovery(mk(gt.phi[1].copy()), gt, p)["outliers"][0]["overlap_R"]
    return math.isclose(good, 1.0, rel_tol=1e-12) and bad <= 1e-12, f"{good!r} {bad!r}"


# synth

@check
def synth_modes():
    gt = gen_rank_r(64, 256, 1, [1.0], "uniform-sign", seed=0)
    ok1 = np.allclose(np.abs(gt.phi), 1 / 8, rtol=0, atol=1e-15) and gt.homogeneous
    gt3 = gen_rank_r(50, 200, 3, [1.0, 0.5, 0.2], "random-orthonormal", seed=1)
    gtl = gen_rank_r(100, 400, 1, [1.0], "localized", seed=2, kappa_target=3.0)
    kappa = math.sqrt(100) * np.abs(gtl.phi).max()
    return ok1 and gt3.gram_deviation() <= 1e-10 and 2.7 <= kappa <= 3.3, f"kappa {kappa:.4f}"


@check
def unfolding_examples():
    n = 20
    g = stream(3, 1)
    u, v, w = (unit_sphere(g, n) for _ in range(3))
    gt1 = unfold_tensor_cp(n, 3, [(u, v, w)], [2.0])
    ok1 = math.isclose(gt1.nu[0], 2.0, rel_tol=1e-12) and abs(abs(gt1.phi[0] @ u) - 1) < 1e-12
    a = unit_sphere(g, n)
    b = unit_sphere(g, n)
    b -= (a @ b) * a
    b /= np.linalg.norm(b)
    c = 0.5 * a + math.sqrt(3) / 2 * b  # 60 degrees from a
    comps = [(a, unit_sphere(g, n), unit_sphere(g, n)), (c, unit_sphere(g, n), unit_sphere(g, n))]
    gt2 = unfold_tensor_cp(n, 3, comps, [1.0, 0.7])
    T = sum(wt * np.einsum("i,j,k->ijk", *comp) for wt, comp in zip([1.0, 0.7], comps)).reshape(n, n * n)
    s = np.linalg.svd(T, compute_uv=False)[:2]
    ok2 = np.allclose(gt2.nu, s, rtol=1e-9) and np.abs(gt2.dense() - T).max() <= 1e-12
    return ok1 and ok2, f"nu {gt2.nu}"


@check
def sampling_determinism():
    gt = gen_rank_r(30, 300, 1, [1.0], "uniform-sign", seed=0)
    a = sample_observed(gt, SampleSpec(3.0, 11))
    b = sample_observed(gt, SampleSpec(3.0, 11))
    tiny = sample_observed(gen_rank_r(2, 2, 1, [1.0], "uniform-sign", 0), SampleSpec(1 + 1e-6, 0))
    same = np.array_equal(a.rows, b.rows) and np.array_equal(a.cols, b.cols) and np.array_equal(a.values, b.values)
    return same and tiny.nnz <= 4, f"{a.nnz} entries"


# oracle / baseline

@check
def gw_tree_basics():
    gt = gen_rank_r(10, 100, 1, [1.0], "uniform-sign", seed=0)
    t0 = oracle.sample_gw_tree(gt, 2.0, 0, 3, seed=0)
    t = oracle.sample_gw_tree(gt, 2.0, 5, 3, seed=1)
    kids = t.children_count()
    odd = t.depth % 2 == 1
    ok_odd = np.all(kids[odd & (t.depth < 5)] == 1)
    f0 = oracle.tree_functional(t, gt, 0, 0, 2.0)
    return len(t0) == 1 and t0.root_label == 3 and ok_odd and f0 == gt.phi[0, 3], f"{len(t)} nodes"


@check
def svd_baseline_exact():
    g = stream(0, 12)
    M = g.standard_normal((8, 12))
    rows, cols = np.nonzero(np.ones_like(M))
    obs = ingest_arrays(8, 12, 1.5, rows, cols, M[rows, cols], pre_scaled=True)
    res = truncated_svd_baseline(obs, 3)
    U, s, _ = np.linalg.svd(M)
    ok = np.allclose(res.singular_values, s[:3], rtol=1e-8) and all(abs(abs(res.left[i] @ U[:, i]) - 1) <= 1e-8 for i in range(3))
    zero = truncated_svd_baseline(ingest(4, 6, 1.5, []), 2)
    return ok and not zero.singular_values.any(), f"{res.singular_values}"


def run_all(verbose: bool = True, out=print) -> bool:
    ok_all = True
    for fn in CHECKS:
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashing check is a failing check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
            if verbose:
                traceback.print_exc()
        ok_all &= bool(ok)
        if verbose:
            out(f"{'PASS' if ok else 'FAIL'}  {fn.__name__}: {detail}")
    return ok_all
