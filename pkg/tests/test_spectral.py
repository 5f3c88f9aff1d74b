import math

import numpy as np
import pytest

from helpers import four_cycle, instance, match_error
from nbtcomplete import oracle
from nbtcomplete.nbt_operator import B_operator, dense_B
from nbtcomplete.rng import stream
from nbtcomplete.spectral import (
    EigenPair, arnoldi_topk, attach_left_vectors, classify_spectrum, eigenpairs, gap_rank, power_apply,
    sort_order,
)


@pytest.fixture(scope="module")
def medium():
    gt, obs, tp = instance(60, 1200, 4.0, 11, r=2, nu=[1.0, 0.7])
    return gt, tp


def residual(op, p):
    return np.linalg.norm(op(p.right_vec) - p.lam * p.right_vec) / np.linalg.norm(p.right_vec)


def test_diagonal_operator():
    diag = np.array([5.0, -4.0, 3.0, 0.5, 0.1, 0.01])
    res = arnoldi_topk(lambda v: diag * v, diag.size, 3, seed=1)
    np.testing.assert_allclose([p.lam.real for p in res.pairs[:3]], [5.0, -4.0, 3.0], rtol=1e-10)
    assert res.all_converged


def test_four_cycle_eigenvalues():
    tp, _ = four_cycle()
    res = arnoldi_topk(B_operator(tp), 4, 4, krylov_dim=4)
    np.testing.assert_allclose(np.sort([p.lam.real for p in res]), [-1, -1, 1, 1], atol=1e-10)


def test_residual_invariant(medium):
    _, tp = medium
    op = B_operator(tp)
    res = arnoldi_topk(op, len(tp), 6, seed=3)
    for p in res.pairs:
        assert p.converged
        assert residual(op, p) <= 1e-8 * abs(p.lam) * (1 + 1e-6)
        assert np.linalg.norm(p.right_vec) == pytest.approx(1.0)


def test_conjugate_closure(medium):
    _, tp = medium
    res = arnoldi_topk(B_operator(tp), len(tp), 8, seed=5)
    lams = [p.lam for p in res.pairs]
    for p in res.pairs:
        if abs(p.lam.imag) > 1e-12 * abs(p.lam):
            partner = [q for q in res.pairs if q.lam == np.conj(p.lam)]
            assert partner, f"{p.lam} has no conjugate in {lams}"
            assert np.allclose(partner[0].right_vec, np.conj(p.right_vec))


def test_modulus_order(medium):
    _, tp = medium
    mods = [p.modulus for p in arnoldi_topk(B_operator(tp), len(tp), 8, seed=5)]
    assert all(a >= b - 1e-12 for a, b in zip(mods, mods[1:]))


def test_matches_dense_spectrum():
    worst = 0.0
    count = 0
    for seed in range(200, 240):
        _, _, tp = instance(12, 40, 3.0, seed)
        if not 20 <= len(tp) <= 120:
            continue
        ref = oracle.dense_spectrum(tp)[:5]
        if abs(ref[-1]) <= 1e-6:
            continue
        got = [p.lam for p in arnoldi_topk(B_operator(tp), len(tp), 5, seed=seed)][:5]
        worst = max(worst, match_error(got, ref))
        count += 1
    assert count >= 5 and worst <= 1e-8


def test_left_right_consistency(medium):
    _, tp = medium
    res = eigenpairs(tp, 4, seed=2)
    BT = B_operator(tp, transpose=True)
    matched = [p for p in res.pairs if p.left_vec is not None]
    assert matched
    for p in matched:
        r = np.linalg.norm(BT(p.left_vec) - p.lam * p.left_vec)
        assert r <= 1e-8 * abs(p.lam) * (1 + 1e-6)
    # left and right vectors of distinct eigenvalues are biorthogonal
    for p in matched:
        for q in matched:
            if abs(p.lam - q.lam) > 1e-3:
                assert abs(np.vdot(np.conj(q.left_vec), p.right_vec)) <= 1e-6


def test_left_vectors_satisfy_parity_time(medium):
    # J_delta maps right eigenvectors to left eigenvectors
    _, tp = medium
    res = eigenpairs(tp, 2, seed=4)
    p = res.pairs[0]
    jv = tp.delta * p.right_vec[tp.inverse]
    jv /= np.linalg.norm(jv)
    assert abs(abs(np.vdot(jv, p.left_vec)) - 1.0) <= 1e-6


def test_clamps_and_degenerate_inputs():
    assert len(arnoldi_topk(lambda v: v, 0, 3)) == 0
    assert len(arnoldi_topk(lambda v: v, 5, 0)) == 0
    res = arnoldi_topk(lambda v: 2 * v, 3, 10)
    assert len(res) == 3 and all(p.lam == pytest.approx(2.0) for p in res)
    with pytest.raises(ValueError):
        arnoldi_topk(lambda v: v, 5, 2, tol=0.0)


def test_invariant_subspace_breakdown():
    # rank-one operator: the Krylov space is exhausted after one step
    u = stream(0, 77).standard_normal(50)
    u /= np.linalg.norm(u)
    res = arnoldi_topk(lambda v: 3.0 * u * (u @ v), 50, 2, seed=1)
    assert res.pairs[0].lam == pytest.approx(3.0, rel=1e-12)
    assert abs(abs(res.pairs[0].right_vec @ u) - 1) <= 1e-10


def test_unconverged_is_flagged(medium):
    _, tp = medium
    res = arnoldi_topk(B_operator(tp), len(tp), 6, krylov_dim=8, tol=1e-15, max_restarts=0, seed=1)
    assert not res.all_converged


def test_deterministic(medium):
    _, tp = medium
    a = arnoldi_topk(B_operator(tp), len(tp), 4, seed=9)
    b = arnoldi_topk(B_operator(tp), len(tp), 4, seed=9)
    assert [p.lam for p in a] == [p.lam for p in b]
    assert all(np.array_equal(p.right_vec, q.right_vec) for p, q in zip(a, b))


def test_sort_order_ties():
    w = np.array([1 - 1j, 2.0, 1 + 1j, -2.0, 0.5])
    order = sort_order(w)
    mods = np.abs(w[order])
    assert all(a >= b for a, b in zip(mods, mods[1:]))
    assert w[order][0] in (2.0, -2.0)


def test_attach_left_vectors_by_proximity():
    right = [EigenPair(2.0, np.ones(2), 0.0), EigenPair(1.0, np.ones(2), 0.0)]
    left = [EigenPair(1.0 + 1e-9, np.array([0.0, 1.0]), 0.0), EigenPair(5.0, np.zeros(2), 0.0)]
    attach_left_vectors(right, left)
    assert right[0].left_vec is None
    assert np.array_equal(right[1].left_vec, [0.0, 1.0])


def test_classify_spectrum():
    pairs = [EigenPair(4.0, np.ones(1), 0.0), EigenPair(0.2, np.ones(1), 0.0)]
    s = classify_spectrum(pairs, 1, 0.5)
    assert len(s.outliers) == 1 and s.bulk_radius == 0.2 and s.bulk_ratio == pytest.approx(0.8)
    s0 = classify_spectrum(pairs, 0, 0.5)
    assert not s0.outliers and s0.bulk_radius == 4.0
    s3 = classify_spectrum(pairs, 3, 0.5)
    assert s3.partial and math.isnan(s3.bulk_radius)


def test_gap_rank():
    mk = lambda mods: [EigenPair(m, np.ones(1), 0.0) for m in mods]
    assert gap_rank(mk([1.0, 0.9, 0.2, 0.19])) == 2
    assert gap_rank(mk([1.0, 0.9, 0.8])) == 0
    assert gap_rank(mk([1.0])) == 0


def test_power_apply():
    tp, _ = four_cycle()
    B = dense_B(tp)
    v = np.zeros(4)
    v[0] = 1.0
    w, log_scale = power_apply(B_operator(tp), v, 1)
    np.testing.assert_allclose(w * math.exp(log_scale), B @ v, atol=1e-15)
    w, log_scale = power_apply(B_operator(tp), v, 0)
    np.testing.assert_allclose(w, v)
    w, log_scale = power_apply(lambda x: 0 * x, v, 2)
    assert log_scale == -math.inf and not w.any()
    with pytest.raises(ValueError):
        power_apply(B_operator(tp), v, -1)


def test_power_apply_large_ell_no_overflow():
    v = np.ones(3) / math.sqrt(3)
    w, log_scale = power_apply(lambda x: 1e10 * x, v, 100)
    assert np.isfinite(w).all() and log_scale == pytest.approx(1000 * math.log(10))
