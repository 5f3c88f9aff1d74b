"""Shared instance builders and comparison helpers for the test suite."""

import math

import numpy as np

from nbtcomplete.nbt_operator import enumerate_two_paths
from nbtcomplete.rng import stream
from nbtcomplete.sparse_core import build_graph, ingest, prune_degree_one
from nbtcomplete.synth import SampleSpec, gen_rank_r, sample_observed


def tp_from(n, m, entries, d=1.5):
    obs = ingest(n, m, d, entries, pre_scaled=True)
    return enumerate_two_paths(prune_degree_one(build_graph(obs)), obs), obs


def four_cycle():
    return tp_from(2, 2, [(0, 0, 1.0), (1, 0, 1.0), (1, 1, 1.0), (0, 1, 1.0)])


def instance(n, m, d, seed, r=2, mode="random-orthonormal", nu=None):
    nu = np.linspace(1.0, 0.5, r) if nu is None else nu
    gt = gen_rank_r(n, m, r, nu, mode, seed)
    obs = sample_observed(gt, SampleSpec(d, seed))
    return gt, obs, enumerate_two_paths(prune_degree_one(build_graph(obs)), obs)


def random_small(seed, n_max=50, d_max=5.0, n_min=4):
    """Random rank-1..3 instance with n <= n_max and 1.5 <= d <= d_max."""
    g = stream(seed, 0x5445)
    n = int(g.integers(n_min, n_max + 1))
    m = int(g.integers(max(n, 30), 6 * max(n, 30)))
    r = int(g.integers(1, min(3, n) + 1))
    d = float(g.uniform(1.5, d_max))
    mode = "random-orthonormal" if r > 1 or g.random() < 0.5 else "uniform-sign"
    nu = np.sort(g.uniform(0.3, 1.5, r))[::-1]
    return instance(n, m, d, seed, r, mode, nu) + (d,)


def rel(a, b):
    nb = np.linalg.norm(b)
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b)) / (nb if nb > 0 else 1.0))


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
