"""Oriented two-paths and the bipartite non-backtracking operator.

A two-path ``e = (e1, e2, e3)`` walks left -> right -> left with
``e1 != e3``. The operator acts on vectors indexed by two-paths::

    (B v)(e) = sum over f with f1 == e3 and f2 != e2 of delta[f] * v(f)

where ``delta[f] = A[f1, f2] * A[f3, f2]``. The matrix-free form uses

    (B v)(e) = t[e3] - s[(e3, e2)]

with ``t[x]`` the delta-weighted sum of ``v`` over paths leaving ``x`` and
``s[(x, y)]`` the same sum restricted to paths leaving ``x`` through ``y``.
All sums run over ascending path index (``np.bincount``), so results are
bit-stable.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .sparse_core import ObservedMatrix, PrunedGraph, _frozen

DEFAULT_PATH_CAP = 10**8
DENSE_CAP = 2000
MAGIC = b"NBT1"


class SizingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TwoPathSet:
    """Enumerated two-paths in lexicographic ``(e1, e2, e3)`` order.

    ``in_edge[e]`` / ``out_edge[e]`` index the graph edges ``{e1, e2}`` and
    ``{e3, e2}``; ``start_ptr`` and ``end_ptr``/``end_idx`` are CSR-style
    lists of paths by first and last left vertex.
    """

    n: int
    e1: np.ndarray
    e2: np.ndarray
    e3: np.ndarray
    delta: np.ndarray
    inverse: np.ndarray = field(repr=False)
    in_edge: np.ndarray = field(repr=False)
    out_edge: np.ndarray = field(repr=False)
    n_edges: int = field(repr=False)
    start_ptr: np.ndarray = field(repr=False)
    end_ptr: np.ndarray = field(repr=False)
    end_idx: np.ndarray = field(repr=False)

    def __len__(self) -> int:
        return int(self.e1.size)

    @property
    def paths(self) -> np.ndarray:
        return np.stack([self.e1, self.e2, self.e3], axis=1)

    def starts_at(self, x: int) -> np.ndarray:
        return np.arange(self.start_ptr[x], self.start_ptr[x + 1])

    def ends_at(self, x: int) -> np.ndarray:
        return self.end_idx[self.end_ptr[x]:self.end_ptr[x + 1]]

    @classmethod
    def from_triples(cls, n: int, triples, delta) -> "TwoPathSet":
        """Build and validate from raw triples (any order) and weights."""
        triples = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
        delta = np.asarray(delta, dtype=np.float64).ravel()
        if delta.size != triples.shape[0]:
            raise ValueError("delta length does not match number of paths")
        e1, e2, e3 = triples[:, 0], triples[:, 1], triples[:, 2]
        if triples.size and ((e1 < 0).any() or (e3 < 0).any() or (e1 >= n).any() or (e3 >= n).any() or (e2 < 0).any()):
            raise ValueError("left index out of range")
        if (e1 == e3).any():
            raise ValueError("two-path with e1 == e3")
        order = np.lexsort((e3, e2, e1))
        e1, e2, e3, delta = e1[order], e2[order], e3[order], delta[order]
        n_paths = e1.size
        n_right = int(e2.max()) + 1 if n_paths else 0
        if n_paths and n * n_right * n >= 2**62:
            raise SizingError("index space too large for int64 path keys")

        key = (e1 * n_right + e2) * n + e3
        if n_paths and (np.diff(key) == 0).any():
            raise ValueError("duplicate two-path")
        inv_key = (e3 * n_right + e2) * n + e1
        inverse = np.searchsorted(key, inv_key)
        if n_paths and ((inverse >= n_paths).any() or (key[np.minimum(inverse, n_paths - 1)] != inv_key).any()):
            raise ValueError("two-path set is not closed under inversion")
        if not np.array_equal(delta[inverse], delta):
            raise ValueError("delta is not invariant under inversion")

        edge_keys, in_edge = np.unique(e1 * n_right + e2, return_inverse=True)
        out_edge = np.searchsorted(edge_keys, e3 * n_right + e2)

        start_ptr = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(np.bincount(e1, minlength=n), out=start_ptr[1:])
        end_idx = np.argsort(e3, kind="stable")
        end_ptr = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(np.bincount(e3, minlength=n), out=end_ptr[1:])

        return cls(
            n=int(n),
            e1=_frozen(e1, np.int64),
            e2=_frozen(e2, np.int64),
            e3=_frozen(e3, np.int64),
            delta=_frozen(delta, np.float64),
            inverse=_frozen(inverse, np.int64),
            in_edge=_frozen(in_edge.ravel(), np.int64),
            out_edge=_frozen(out_edge, np.int64),
            n_edges=int(edge_keys.size),
            start_ptr=_frozen(start_ptr, np.int64),
            end_ptr=_frozen(end_ptr, np.int64),
            end_idx=_frozen(end_idx, np.int64),
        )


def enumerate_two_paths(g: PrunedGraph, obs: ObservedMatrix | None = None, cap: int = DEFAULT_PATH_CAP) -> TwoPathSet:
    """All oriented two-paths of the pruned graph.

    Weights come from the graph itself (which was built from ``obs``); ``obs``
    is only used for a consistency check.
    """
    if obs is not None and obs.n != g.n:
        raise ValueError("pruned graph and observation disagree on n")
    deg = g.right_degree.astype(np.int64)
    size = int(np.sum(deg * deg))
    if size > cap:
        raise SizingError(f"sum of squared right degrees {size} exceeds cap {cap}")
    indptr, xs, ws = g.csc.indptr, g.csc.indices.astype(np.int64), g.csc.data
    col = np.repeat(np.arange(g.m, dtype=np.int64), deg)
    # position a of the first edge, local slot of the second among deg-1 others
    a = np.repeat(np.arange(xs.size, dtype=np.int64), deg[col] - 1)
    counts = deg[col] - 1
    grp_start = np.repeat(np.cumsum(counts) - counts, counts)
    r = np.arange(a.size, dtype=np.int64) - grp_start
    base = indptr[col[a]]
    i_local = a - base
    b = base + r + (r >= i_local)
    e1, e3, y = xs[a], xs[b], col[a]
    delta = ws[a] * ws[b]
    triples = np.stack([e1, y, e3], axis=1)
    tp = TwoPathSet.from_triples(g.n, triples, delta)
    expected = int(np.sum(deg * (deg - 1)))
    if len(tp) != expected:
        raise AssertionError(f"enumerated {len(tp)} two-paths, expected {expected}")
    return tp


def apply_B(tp: TwoPathSet, v: np.ndarray) -> np.ndarray:
    w = tp.delta * v
    t = np.bincount(tp.e1, weights=w, minlength=tp.n)
    s = np.bincount(tp.in_edge, weights=w, minlength=tp.n_edges)
    return t[tp.e3] - s[tp.out_edge]


def apply_B_transpose(tp: TwoPathSet, v: np.ndarray) -> np.ndarray:
    u = np.bincount(tp.e3, weights=v, minlength=tp.n)
    s = np.bincount(tp.out_edge, weights=v, minlength=tp.n_edges)
    return tp.delta * (u[tp.e1] - s[tp.in_edge])


def _apply_complex(fn, tp, v):
    if np.iscomplexobj(v):
        return fn(tp, v.real) + 1j * fn(tp, v.imag)
    return fn(tp, v)


def B_operator(tp: TwoPathSet, transpose: bool = False):
    """Closure applying B (or B^T) to real or complex vectors."""
    fn = apply_B_transpose if transpose else apply_B
    return lambda v: _apply_complex(fn, tp, v)


def apply_B_direct(tp: TwoPathSet, v: np.ndarray) -> np.ndarray:
    """Reference implementation straight from the definition (slow)."""
    out = np.zeros(len(tp), dtype=np.result_type(v, np.float64))
    for e in range(len(tp)):
        x, y = tp.e3[e], tp.e2[e]
        fs = tp.starts_at(x)
        fs = fs[tp.e2[fs] != y]
        out[e] = np.sum(tp.delta[fs] * v[fs])
    return out


def apply_S(tp: TwoPathSet, v: np.ndarray) -> np.ndarray:
    return np.bincount(tp.e1, weights=v, minlength=tp.n)


def apply_S_delta(tp: TwoPathSet, v: np.ndarray) -> np.ndarray:
    return np.bincount(tp.e1, weights=tp.delta * v, minlength=tp.n)


def apply_T(tp: TwoPathSet, w: np.ndarray) -> np.ndarray:
    return np.asarray(w)[tp.e3]


def apply_J_delta(tp: TwoPathSet, v: np.ndarray) -> np.ndarray:
    return tp.delta * v[tp.inverse]


def apply_K_delta(tp: TwoPathSet, v: np.ndarray) -> np.ndarray:
    """Backtracking part: sum of delta[f] v(f) over f with f1 == e3, f2 == e2.

    Equals ``J_delta`` exactly when every right vertex has degree 2.
    """
    s = np.bincount(tp.in_edge, weights=tp.delta * v, minlength=tp.n_edges)
    return s[tp.out_edge]


def verify_relations(tp: TwoPathSet, trials: int = 10, seed: int = 0) -> dict:
    """Residuals of the operator identities over random unit vectors.

    ``degree2_form``: ||Bv - (T S_delta v - J_delta v)||.
    ``general_form``: ||Bv - (T S_delta v - K_delta v)||.
    ``parity_time``: ||J_delta B v - B^T J_delta v||.
    ``direct_vs_factored``: ||Bv - B_direct v|| (only when |E| <= 2000).
    """
    from .rng import stream, unit_sphere

    if trials < 1:
        raise ValueError("trials must be >= 1")
    out = {"degree2_form": 0.0, "general_form": 0.0, "parity_time": 0.0, "direct_vs_factored": 0.0}
    N = len(tp)
    out["delta_max"] = float(np.abs(tp.delta).max()) if N else 0.0
    if N == 0:
        return out
    for k in range(trials):
        v = unit_sphere(stream(seed, k), N)
        bv = apply_B(tp, v)
        tsv = apply_T(tp, apply_S_delta(tp, v))
        out["degree2_form"] = max(out["degree2_form"], float(np.linalg.norm(bv - (tsv - apply_J_delta(tp, v)))))
        out["general_form"] = max(out["general_form"], float(np.linalg.norm(bv - (tsv - apply_K_delta(tp, v)))))
        pt = apply_J_delta(tp, bv) - apply_B_transpose(tp, apply_J_delta(tp, v))
        out["parity_time"] = max(out["parity_time"], float(np.linalg.norm(pt)))
        if N <= DENSE_CAP:
            out["direct_vs_factored"] = max(out["direct_vs_factored"], float(np.linalg.norm(bv - apply_B_direct(tp, v))))
    return out


def dense_B(tp: TwoPathSet, cap: int = DENSE_CAP) -> np.ndarray:
    N = len(tp)
    if N > cap:
        raise SizingError(f"|E| = {N} exceeds dense cap {cap}")
    out = np.zeros((N, N))
    for e in range(N):
        fs = tp.starts_at(tp.e3[e])
        fs = fs[tp.e2[fs] != tp.e2[e]]
        out[e, fs] = tp.delta[fs]
    return out


def save_two_paths(tp: TwoPathSet, path) -> None:
    """Binary dump: ``NBT1``, u64 n, u64 |E|, int64 triples, float64 delta (little endian)."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<QQ", tp.n, len(tp)))
        fh.write(np.ascontiguousarray(tp.paths, dtype="<i8").tobytes())
        fh.write(np.ascontiguousarray(tp.delta, dtype="<f8").tobytes())


def load_two_paths(path) -> TwoPathSet:
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ValueError(f"{path}: bad magic")
        n, count = struct.unpack("<QQ", fh.read(16))
        triples = np.frombuffer(fh.read(24 * count), dtype="<i8")
        delta = np.frombuffer(fh.read(8 * count), dtype="<f8")
        if triples.size != 3 * count or delta.size != count:
            raise ValueError(f"{path}: truncated file")
    return TwoPathSet.from_triples(int(n), triples.reshape(-1, 3), delta)
