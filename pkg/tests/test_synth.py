import math

import numpy as np
import pytest

from nbtcomplete import estimator as est
from nbtcomplete.rng import stream, unit_sphere
from nbtcomplete.synth import (
    GenerationError, SampleSpec, gen_rank_r, homogeneity_deviation, read_ground_truth, sample_observed,
    unfold_tensor_cp, write_ground_truth,
)


def test_random_orthonormal_gram():
    gt = gen_rank_r(50, 400, 3, [1.0, 0.8, 0.5], "random-orthonormal", seed=1)
    assert gt.gram_deviation() <= 1e-10
    assert not gt.homogeneous


def test_uniform_sign_rank_one_is_homogeneous():
    nu = 1.3
    gt = gen_rank_r(64, 4096, 1, [nu], "uniform-sign", seed=2)
    assert gt.homogeneous
    assert np.all(np.abs(gt.phi) == 1 / 8) and np.all(np.abs(gt.psi) == 1 / 64)
    Q = est.VarianceOperator(gt).dense_Q()
    np.testing.assert_allclose(Q, nu**2 / math.sqrt(64 * 4096), rtol=1e-12)
    rho = est.compute_params(gt, 2.0).rho
    assert rho == pytest.approx(nu**2, rel=1e-12)
    assert homogeneity_deviation(gt, rho) <= 1e-12


def test_uniform_sign_higher_rank_orthonormal():
    gt = gen_rank_r(32, 256, 3, [1.0, 0.9, 0.8], "uniform-sign", seed=3)
    assert gt.gram_deviation() <= 1e-14
    assert np.all(np.isclose(np.abs(gt.phi), 1 / math.sqrt(32)))
    assert not gt.homogeneous


def test_random_rank_two_not_homogeneous():
    gt = gen_rank_r(40, 400, 2, [1.0, 0.8], "random-orthonormal", seed=3)
    assert homogeneity_deviation(gt, est.compute_params(gt, 2.0).rho) > 0.01


def test_localized_kappa():
    gt = gen_rank_r(100, 1000, 1, [1.0], "localized", seed=4, kappa_target=3.0)
    kappa = math.sqrt(100) * np.abs(gt.phi).max()
    assert 2.7 <= kappa <= 3.3
    assert est.compute_params(gt, 2.0).kappa == pytest.approx(kappa)
    assert gt.gram_deviation() <= 1e-10


@pytest.mark.parametrize("kwargs, match", [
    (dict(n=10, m=20, r=2, nu=[1.0, 0.5, 0.2]), "expected 2"),
    (dict(n=10, m=20, r=11, nu=[1.0] * 11), "rank"),
    (dict(n=10, m=20, r=2, nu=[0.5, 1.0]), "non-increasing"),
    (dict(n=10, m=20, r=1, nu=[1.0], vector_mode="spiky"), "vector_mode"),
    (dict(n=10, m=20, r=1, nu=[1.0], vector_mode="localized"), "kappa_target"),
    (dict(n=16, m=32, r=1, nu=[1.0], vector_mode="localized", kappa_target=5.0), "sqrt"),
    (dict(n=10, m=20, r=3, nu=[1.0, 1.0, 1.0], vector_mode="uniform-sign"), "divisible"),
])
def test_gen_rank_r_errors(kwargs, match):
    with pytest.raises(GenerationError, match=match):
        gen_rank_r(**kwargs)


def test_unfolding_entries_match_tensor_products():
    n, g = 9, stream(5, 0)
    comps = [tuple(unit_sphere(g, n) for _ in range(3)) for _ in range(2)]
    w = [1.5, 0.7]
    gt = unfold_tensor_cp(n, 3, comps, w)
    assert gt.m == n * n
    xs = g.integers(0, n, 1000)
    ys = g.integers(0, n * n, 1000)
    y1, y2 = ys // n, ys % n
    explicit = np.zeros(1000)
    for wi, (u, v, z) in zip(w, comps):
        explicit = explicit + wi * u[xs] * v[y1] * z[y2]
    assert np.array_equal(gt.entries(xs, ys), explicit)
    # the singular-value representation agrees up to rounding
    svd_form = np.einsum("i,i...,i...->...", gt.nu, gt.phi[:, xs], gt.psi[:, ys])
    np.testing.assert_allclose(svd_form, explicit, rtol=0, atol=1e-13)


def test_unfolding_non_orthogonal_factors():
    n = 20
    g = stream(6, 0)
    a = unit_sphere(g, n)
    b = unit_sphere(g, n)
    b = b - (b @ a) * a
    b /= np.linalg.norm(b)
    a2 = math.cos(math.pi / 3) * a + math.sin(math.pi / 3) * b  # 60 degrees from a
    comps = [(a, unit_sphere(g, n), unit_sphere(g, n)), (a2, unit_sphere(g, n), unit_sphere(g, n))]
    gt = unfold_tensor_cp(n, 3, comps, [1.0, 0.8])
    dense = sum(w * np.outer(c[0], np.kron(c[1], c[2])) for w, c in zip([1.0, 0.8], comps))
    u, s, vt = np.linalg.svd(dense, full_matrices=False)
    np.testing.assert_allclose(gt.nu, s[:2], rtol=1e-9)
    for i in range(2):
        assert abs(abs(gt.phi[i] @ u[:, i]) - 1) <= 1e-9
        assert abs(abs(gt.psi[i] @ vt[i]) - 1) <= 1e-9
    assert gt.gram_deviation() <= 1e-9
    np.testing.assert_allclose(gt.dense(), dense, atol=1e-12)


def test_unfolding_order_five():
    n, g = 3, stream(7, 0)
    comps = [tuple(unit_sphere(g, n) for _ in range(5))]
    gt = unfold_tensor_cp(n, 5, comps, [2.0])
    assert gt.m == 81 and gt.nu[0] == pytest.approx(2.0)
    y = 2 * 27 + 1 * 9 + 0 * 3 + 2
    u = comps[0]
    assert gt(1, y) == 2.0 * u[0][1] * u[1][2] * u[2][1] * u[3][0] * u[4][2]


@pytest.mark.parametrize("k_order", [2, 4, 1])
def test_unfolding_rejects_even_order(k_order):
    g = stream(0, 0)
    with pytest.raises(GenerationError):
        unfold_tensor_cp(4, k_order, [tuple(unit_sphere(g, 4) for _ in range(max(k_order, 1)))], [1.0])


def test_unfolding_rejects_non_unit_factor():
    with pytest.raises(GenerationError, match="unit"):
        unfold_tensor_cp(3, 3, [(np.ones(3), np.ones(3), np.ones(3))], [1.0])


def test_sampler_deterministic_and_scaled():
    gt = gen_rank_r(30, 900, 2, [1.0, 0.5], "random-orthonormal", seed=8)
    a = sample_observed(gt, SampleSpec(3.0, 11))
    b = sample_observed(gt, SampleSpec(3.0, 11))
    c = sample_observed(gt, SampleSpec(3.0, 12))
    assert np.array_equal(a.rows, b.rows) and np.array_equal(a.values, b.values)
    assert not (np.array_equal(a.cols, c.cols) and a.nnz == c.nnz)
    np.testing.assert_allclose(a.values, gt.entries(a.rows, a.cols) * math.sqrt(30 * 900) / 3.0, rtol=1e-15)


def test_sampler_expected_count():
    n, m, d = 40, 1600, 4.0
    gt = gen_rank_r(n, m, 1, [1.0], "uniform-sign", seed=0)
    p = d / math.sqrt(n * m)
    counts = np.array([sample_observed(gt, SampleSpec(d, s)).nnz for s in range(200)])
    mean, sd = n * m * p, math.sqrt(n * m * p * (1 - p))
    # mean of 200 draws within 4 standard errors
    assert abs(counts.mean() - mean) <= 4 * sd / math.sqrt(200)
    assert abs(counts.std(ddof=1) / sd - 1) < 0.2


def test_fixed_count_sampler():
    gt = gen_rank_r(20, 400, 1, [1.0], "uniform-sign", seed=0)
    obs = sample_observed(gt, SampleSpec(2.5, 3, "fixed-count"))
    assert obs.nnz == round(2.5 * math.sqrt(20 * 400))
    with pytest.raises(GenerationError, match="sampler"):
        sample_observed(gt, SampleSpec(2.5, 3, "poisson"))


def test_sampler_caps():
    gt = gen_rank_r(20, 400, 1, [1.0], "uniform-sign", seed=0)
    with pytest.raises(GenerationError, match="cap"):
        sample_observed(gt, SampleSpec(5.0, 0), cap=100)
    with pytest.raises(GenerationError, match="probability"):
        sample_observed(gt, SampleSpec(100.0, 0))


def test_ground_truth_round_trip(tmp_path):
    gt = gen_rank_r(12, 48, 2, [1.0, 0.6], "random-orthonormal", seed=9)
    write_ground_truth(gt, tmp_path / "gt.txt")
    back = read_ground_truth(tmp_path / "gt.txt")
    assert np.array_equal(back.nu, gt.nu) and np.array_equal(back.phi, gt.phi) and np.array_equal(back.psi, gt.psi)


def test_ground_truth_round_trip_implicit(tmp_path):
    g = stream(10, 0)
    gt = unfold_tensor_cp(5, 3, [tuple(unit_sphere(g, 5) for _ in range(3)) for _ in range(2)], [1.0, 0.4])
    write_ground_truth(gt, tmp_path / "gt.txt")
    text = (tmp_path / "gt.txt").read_text()
    assert "implicit-kron 3 2" in text
    back = read_ground_truth(tmp_path / "gt.txt")
    assert back.m == 25
    xs, ys = np.arange(5).repeat(25), np.tile(np.arange(25), 5)
    assert np.array_equal(back.entries(xs, ys), gt.entries(xs, ys))
