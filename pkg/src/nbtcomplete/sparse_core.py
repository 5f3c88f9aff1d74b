"""Sparse observations and their bipartite graph view.

Left vertices are the n rows, right vertices the m columns. Indices are
0-based everywhere, including the text format.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp


class ObservationError(ValueError):
    pass


def _frozen(a, dtype):
    a = np.ascontiguousarray(a, dtype=dtype)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class ObservedMatrix:
    """Rescaled sparse observation ``A = sqrt(mn)/d * (X o M)``.

    ``rows``, ``cols`` and ``values`` are kept in row-major order; ``values``
    are already rescaled.
    """

    n: int
    m: int
    d: float
    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray

    @property
    def p(self) -> float:
        return self.d / math.sqrt(self.n * self.m)

    @property
    def scale(self) -> float:
        return math.sqrt(self.n * self.m) / self.d

    @property
    def nnz(self) -> int:
        return int(self.rows.size)

    @property
    def entries(self) -> list[tuple[int, int, float]]:
        return list(zip(self.rows.tolist(), self.cols.tolist(), self.values.tolist()))

    def to_csr(self) -> sp.csr_matrix:
        indptr = np.zeros(self.n + 1, dtype=np.int64)
        np.cumsum(np.bincount(self.rows, minlength=self.n), out=indptr[1:])
        return sp.csr_matrix(
            (self.values.copy(), self.cols.astype(np.int64), indptr), shape=(self.n, self.m)
        )


def ingest_arrays(n, m, d, rows, cols, vals, pre_scaled=False) -> ObservedMatrix:
    """Vectorized :func:`ingest`."""
    n, m, d = int(n), int(m), float(d)
    if n < 2:
        raise ObservationError(f"n must be >= 2, got {n}")
    if m < n:
        raise ObservationError(f"m must be >= n, got m={m} < n={n}")
    if not d > 1.0:
        raise ObservationError(f"d must be > 1, got {d}")
    if d >= math.sqrt(n * m):
        raise ObservationError(f"sampling probability p = d/sqrt(nm) = {d / math.sqrt(n * m):.6g} >= 1")

    rows = np.asarray(rows, dtype=np.int64).ravel()
    cols = np.asarray(cols, dtype=np.int64).ravel()
    vals = np.asarray(vals, dtype=np.float64).ravel()
    if not (rows.size == cols.size == vals.size):
        raise ObservationError("rows, cols and values must have equal length")
    if rows.size:
        bad = (rows < 0) | (rows >= n) | (cols < 0) | (cols >= m)
        if bad.any():
            k = int(np.flatnonzero(bad)[0])
            raise ObservationError(f"index out of range at entry ({rows[k]}, {cols[k]})")
        if not np.isfinite(vals).all():
            k = int(np.flatnonzero(~np.isfinite(vals))[0])
            raise ObservationError(f"non-finite value at entry ({rows[k]}, {cols[k]})")
        key = rows * m + cols
        order = np.argsort(key, kind="stable")
        key = key[order]
        dup = np.flatnonzero(key[1:] == key[:-1])
        if dup.size:
            k = order[dup[0]]
            raise ObservationError(f"duplicate entry at ({rows[k]}, {cols[k]})")
        rows, cols, vals = rows[order], cols[order], vals[order]
    if not pre_scaled:
        vals = vals * (math.sqrt(n * m) / d)
    return ObservedMatrix(
        n, m, d, _frozen(rows, np.int64), _frozen(cols, np.int64), _frozen(vals, np.float64)
    )


def ingest(n, m, d, raw_entries, pre_scaled=False) -> ObservedMatrix:
    """Validate and store observed entries ``(x, y, M_xy)``.

    Unless ``pre_scaled``, each value is multiplied by sqrt(mn)/d.
    """
    raw_entries = list(raw_entries)
    if raw_entries:
        rows, cols, vals = zip(*raw_entries)
    else:
        rows, cols, vals = (), (), ()
    return ingest_arrays(n, m, d, rows, cols, vals, pre_scaled=pre_scaled)


def read_observed(path) -> ObservedMatrix:
    """Read the text format: header ``n m d`` then ``x y value`` lines (raw M)."""
    header = None
    rows, cols, vals = [], [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if header is None:
                if len(parts) != 3:
                    raise ObservationError(f"{path}:{lineno}: header must be 'n m d'")
                header = (int(parts[0]), int(parts[1]), float(parts[2]))
                continue
            if len(parts) != 3:
                raise ObservationError(f"{path}:{lineno}: expected 'x y value'")
            rows.append(int(parts[0]))
            cols.append(int(parts[1]))
            vals.append(float(parts[2]))
    if header is None:
        raise ObservationError(f"{path}: missing header")
    return ingest_arrays(*header, rows, cols, vals, pre_scaled=False)


def write_observed(obs: ObservedMatrix, path) -> None:
    raw = obs.values / obs.scale
    with open(Path(path), "w") as fh:
        fh.write(f"{obs.n} {obs.m} {obs.d!r}\n")
        for x, y, v in zip(obs.rows.tolist(), obs.cols.tolist(), raw.tolist()):
            fh.write(f"{x} {y} {v:.17g}\n")


@dataclass(frozen=True)
class BipartiteGraph:
    """Weighted bipartite graph with left (CSR) and right (CSC) adjacency."""

    n: int
    m: int
    csr: sp.csr_matrix = field(repr=False)
    csc: sp.csc_matrix = field(repr=False)

    @property
    def n_edges(self) -> int:
        return int(self.csr.nnz)

    @property
    def right_degree(self) -> np.ndarray:
        return np.diff(self.csc.indptr)

    @property
    def left_degree(self) -> np.ndarray:
        return np.diff(self.csr.indptr)

    def left_adjacency(self, x: int) -> list[tuple[int, float]]:
        lo, hi = self.csr.indptr[x], self.csr.indptr[x + 1]
        return list(zip(self.csr.indices[lo:hi].tolist(), self.csr.data[lo:hi].tolist()))

    def right_adjacency(self, y: int) -> list[tuple[int, float]]:
        lo, hi = self.csc.indptr[y], self.csc.indptr[y + 1]
        return list(zip(self.csc.indices[lo:hi].tolist(), self.csc.data[lo:hi].tolist()))

    def transpose_consistent(self) -> bool:
        a = sorted(
            (x, y, a)
            for x in range(self.n)
            for y, a in self.left_adjacency(x)
        )
        b = sorted(
            (x, y, a)
            for y in range(self.m)
            for x, a in self.right_adjacency(y)
        )
        return a == b


@dataclass(frozen=True)
class PrunedGraph(BipartiteGraph):
    """Graph restricted to right vertices of degree >= 2.

    ``right_index[j]`` is the original index of pruned right vertex ``j``.
    """

    right_index: np.ndarray = field(default=None, repr=False)


def _graph_from_csr(n, m, csr) -> tuple[sp.csr_matrix, sp.csc_matrix]:
    csr.sort_indices()
    csc = csr.tocsc()
    csc.sort_indices()
    return csr, csc


def build_graph(obs: ObservedMatrix) -> BipartiteGraph:
    csr, csc = _graph_from_csr(obs.n, obs.m, obs.to_csr())
    return BipartiteGraph(obs.n, obs.m, csr, csc)


def prune_degree_one(g: BipartiteGraph) -> PrunedGraph:
    keep = np.flatnonzero(g.right_degree >= 2)
    csc = g.csc[:, keep]
    csc.sort_indices()
    csr = csc.tocsr()
    csr.sort_indices()
    base = g.right_index if isinstance(g, PrunedGraph) else np.arange(g.m)
    right_index = _frozen(base[keep], np.int64)
    return PrunedGraph(g.n, int(keep.size), csr, csc, right_index)


def neighborhood_excess(g: BipartiteGraph, x: int, radius: int) -> int:
    """Cycle excess |E| - |V| + 1 of the radius-ball around left vertex x.

    Distances count bipartite hops, so a left vertex two hops away is at
    distance 2.
    """
    indptr_l, idx_l = g.csr.indptr, g.csr.indices
    indptr_r, idx_r = g.csc.indptr, g.csc.indices
    left_seen = {x}
    right_seen = set()
    frontier = [x]
    on_left = True
    for _ in range(radius):
        nxt = []
        if on_left:
            for u in frontier:
                for y in idx_l[indptr_l[u]:indptr_l[u + 1]].tolist():
                    if y not in right_seen:
                        right_seen.add(y)
                        nxt.append(y)
        else:
            for y in frontier:
                for u in idx_r[indptr_r[y]:indptr_r[y + 1]].tolist():
                    if u not in left_seen:
                        left_seen.add(u)
                        nxt.append(u)
        frontier = nxt
        on_left = not on_left
        if not frontier:
            break
    n_edges = 0
    for u in left_seen:
        ys = idx_l[indptr_l[u]:indptr_l[u + 1]].tolist()
        n_edges += sum(1 for y in ys if y in right_seen)
    return n_edges - (len(left_seen) + len(right_seen)) + 1


def tangle_free_check(g: BipartiteGraph, radius: int):
    """Per-left-vertex flags (ball contains at most one cycle) and their conjunction."""
    if radius < 1:
        raise ValueError("radius must be >= 1")
    excess = np.array([neighborhood_excess(g, x, radius) for x in range(g.n)], dtype=np.int64)
    flags = excess <= 1
    return flags, bool(flags.all())
