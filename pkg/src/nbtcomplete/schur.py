"""Dense nonsymmetric eigensolver for the small projected matrices.

Householder reduction to Hessenberg form, Francis double-shift QR to real
Schur form, eigenvectors by back-substitution on the quasi-triangular
factor. Complex eigenvalues come out in exact conjugate pairs with exactly
conjugated eigenvectors.
"""

from __future__ import annotations

import math

import numpy as np

EPS = np.finfo(float).eps


class QRNoConvergence(RuntimeError):
    pass


def _house(x: np.ndarray):
    alpha = math.sqrt(float(x @ x))
    if alpha == 0.0:
        return None
    v = x.astype(float).copy()
    v[0] += math.copysign(alpha, v[0])
    nv = math.sqrt(float(v @ v))
    if nv == 0.0:
        return None
    return v / nv


def hessenberg(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(H, Q)`` with ``a = Q H Q^T`` and ``H`` upper Hessenberg."""
    h = np.array(a, dtype=float)
    n = h.shape[0]
    q = np.eye(n)
    for k in range(n - 2):
        v = _house(h[k + 1:, k])
        if v is None:
            continue
        h[k + 1:, k:] -= 2.0 * np.outer(v, v @ h[k + 1:, k:])
        h[:, k + 1:] -= 2.0 * np.outer(h[:, k + 1:] @ v, v)
        q[:, k + 1:] -= 2.0 * np.outer(q[:, k + 1:] @ v, v)
        h[k + 2:, k] = 0.0
    return h, q


def _split_real_2x2(h: np.ndarray, z: np.ndarray, k: int) -> None:
    # triangularize block k:k+2 when its eigenvalues are real
    a, b, c, d = h[k, k], h[k, k + 1], h[k + 1, k], h[k + 1, k + 1]
    if c == 0.0:
        return
    p = 0.5 * (a - d)
    disc = p * p + b * c
    if disc < 0.0:
        return
    lam = d + p + math.copysign(math.sqrt(disc), p)
    x0, x1 = lam - d, c
    r = math.hypot(x0, x1)
    x0, x1 = x0 / r, x1 / r
    g = np.array([[x0, -x1], [x1, x0]])
    h[k:k + 2, :] = g.T @ h[k:k + 2, :]
    h[:, k:k + 2] = h[:, k:k + 2] @ g
    z[:, k:k + 2] = z[:, k:k + 2] @ g
    h[k + 1, k] = 0.0


def _small_subdiag(h: np.ndarray, l: int, hi: int, smlnum: float) -> int:
    """Largest k in (l, hi] with a negligible h[k, k-1]; l when there is none."""
    for k in range(hi, l, -1):
        sub = abs(h[k, k - 1])
        if sub <= smlnum:
            return k
        tst = abs(h[k - 1, k - 1]) + abs(h[k, k])
        if tst == 0.0:
            if k - 2 >= l:
                tst += abs(h[k - 1, k - 2])
            if k + 1 <= hi:
                tst += abs(h[k + 1, k])
        if sub <= EPS * tst:
            # conservative test: also compare against the local 2x2 scale
            ab = max(sub, abs(h[k - 1, k]))
            ba = min(sub, abs(h[k - 1, k]))
            diff = abs(h[k - 1, k - 1] - h[k, k])
            aa = max(abs(h[k, k]), diff)
            bb = min(abs(h[k, k]), diff)
            s = aa + ab
            if ba * (ab / s) <= max(smlnum, EPS * (bb * (aa / s))):
                return k
    return l


def _shifts(h: np.ndarray, l: int, hi: int, its: int):
    """Two shifts (r1, i1, r2, i2); exceptional every tenth sweep."""
    if its > 0 and its % 20 == 10:
        s = abs(h[l + 1, l]) + abs(h[l + 2, l + 1])
        h11 = 0.75 * s + h[l, l]
        h12, h21, h22 = -0.4375 * s, s, h11
    elif its > 0 and its % 20 == 0:
        s = abs(h[hi, hi - 1]) + abs(h[hi - 1, hi - 2])
        h11 = 0.75 * s + h[hi, hi]
        h12, h21, h22 = -0.4375 * s, s, h11
    else:
        h11, h12 = h[hi - 1, hi - 1], h[hi - 1, hi]
        h21, h22 = h[hi, hi - 1], h[hi, hi]
    s = abs(h11) + abs(h12) + abs(h21) + abs(h22)
    if s == 0.0:
        return 0.0, 0.0, 0.0, 0.0
    h11, h12, h21, h22 = h11 / s, h12 / s, h21 / s, h22 / s
    tr = 0.5 * (h11 + h22)
    det = (h11 - tr) * (h22 - tr) - h12 * h21
    rtdisc = math.sqrt(abs(det))
    if det >= 0.0:
        return tr * s, rtdisc * s, tr * s, -rtdisc * s
    # real pair: use the root closer to h22 twice
    r1, r2 = tr + rtdisc, tr - rtdisc
    r = r1 if abs(r1 - h22) <= abs(r2 - h22) else r2
    return r * s, 0.0, r * s, 0.0


def _bulge_start(h: np.ndarray, l: int, hi: int, sh) -> tuple[int, np.ndarray]:
    """Row where the double-shift bulge can start, and its first column."""
    r1, i1, r2, i2 = sh
    for m in range(hi - 2, l - 1, -1):
        h21 = h[m + 1, m]
        s = abs(h[m, m] - r2) + abs(i2) + abs(h21)
        if s == 0.0:
            s = 1.0
        h21 /= s
        v = np.array([
            h21 * h[m, m + 1] + (h[m, m] - r1) * ((h[m, m] - r2) / s) - i1 * (i2 / s),
            h21 * (h[m, m] + h[m + 1, m + 1] - r1 - r2),
            h21 * h[m + 2, m + 1],
        ])
        sv = float(np.abs(v).sum())
        if sv > 0.0:
            v /= sv
        if m == l:
            return m, v
        h00 = abs(h[m, m - 1]) * (abs(v[1]) + abs(v[2]))
        h01 = abs(v[0]) * (abs(h[m - 1, m - 1]) + abs(h[m, m]) + abs(h[m + 1, m + 1]))
        if h00 <= EPS * h01:
            return m, v
    return l, v


def real_schur(h: np.ndarray, z: np.ndarray, max_sweeps: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Francis double-shift QR on Hessenberg ``h``; accumulates into ``z``.

    Returns the real Schur factor (2x2 blocks only for complex pairs) and
    the accumulated orthogonal transform. ``max_sweeps`` bounds the sweeps
    spent on each deflation (default ``30 * max(10, n)``).
    """
    h = np.array(h, dtype=float)
    z = np.array(z, dtype=float)
    n = h.shape[0]
    if max_sweeps is None:
        max_sweeps = 30 * max(10, n)
    smlnum = np.finfo(float).tiny * (n / EPS)
    hi = n - 1
    while hi >= 0:
        its = 0
        while True:
            l = _small_subdiag(h, 0, hi, smlnum)
            if l > 0:
                h[l, l - 1] = 0.0
            if l >= hi - 1:
                break
            if its >= max_sweeps:
                raise QRNoConvergence(f"no convergence at row {hi} after {its} sweeps")
            m, v0 = _bulge_start(h, l, hi, _shifts(h, l, hi, its))
            for k in range(m, hi):
                nr = min(3, hi - k + 1)
                x = v0[:nr] if k == m else h[k:k + nr, k - 1].copy()
                v = _house(x)
                if v is None:
                    continue
                if k > m:
                    h[k:k + nr, k - 1:] -= 2.0 * np.outer(v, v @ h[k:k + nr, k - 1:])
                    h[k + 1:k + nr, k - 1] = 0.0
                else:
                    if m > l:
                        # the rest of the column is negligible by choice of m
                        h[k, k - 1] *= 1.0 - 2.0 * v[0] * v[0]
                    h[k:k + nr, k:] -= 2.0 * np.outer(v, v @ h[k:k + nr, k:])
                rr = min(k + 3, hi)
                h[:rr + 1, k:k + nr] -= 2.0 * np.outer(h[:rr + 1, k:k + nr] @ v, v)
                z[:, k:k + nr] -= 2.0 * np.outer(z[:, k:k + nr] @ v, v)
            its += 1
        if l == hi - 1:
            _split_real_2x2(h, z, l)
        hi = l - 1
    return h, z


def _blocks(t: np.ndarray) -> list[tuple[int, int]]:
    n = t.shape[0]
    out, k = [], 0
    while k < n:
        if k < n - 1 and t[k + 1, k] != 0.0:
            out.append((k, 2))
            k += 2
        else:
            out.append((k, 1))
            k += 1
    return out


def _pair(a, b, c, d) -> complex:
    p = 0.5 * (a - d)
    disc = p * p + b * c
    return complex(0.5 * (a + d), math.sqrt(max(-disc, 0.0)))


def _back_substitute(t, blocks, upto, lam, y, smin):
    for start, size in reversed(blocks[:upto]):
        end = start + size
        rhs = -(t[start:end, end:] @ y[end:])
        if size == 1:
            den = t[start, start] - lam
            if abs(den) < smin:
                den = smin
            y[start] = rhs[0] / den
        else:
            m = t[start:end, start:end] - lam * np.eye(2)
            if abs(np.linalg.det(m)) < smin * smin:
                m = m + smin * np.eye(2)
            y[start:end] = np.linalg.solve(m, rhs)


def eig(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvalues and unit-norm right eigenvectors of a real square matrix."""
    a = np.asarray(a, dtype=float)
    n = a.shape[0]
    if n == 0:
        return np.zeros(0, dtype=complex), np.zeros((0, 0), dtype=complex)
    h, q = hessenberg(a)
    t, z = real_schur(h, q)
    blocks = _blocks(t)
    smin = max(EPS * float(np.abs(t).max()), np.finfo(float).tiny)
    w = np.zeros(n, dtype=complex)
    vecs = np.zeros((n, n), dtype=complex)
    for bi, (k, size) in enumerate(blocks):
        y = np.zeros(n, dtype=complex)
        if size == 1:
            lam = complex(t[k, k])
            y[k] = 1.0
        else:
            a11, a12, a21, a22 = t[k, k], t[k, k + 1], t[k + 1, k], t[k + 1, k + 1]
            lam = _pair(a11, a12, a21, a22)
            y[k], y[k + 1] = a12, lam - a11
            if abs(y[k]) + abs(y[k + 1]) == 0.0:
                y[k], y[k + 1] = lam - a22, a21
        _back_substitute(t, blocks, bi, lam, y, smin)
        x = z @ y
        x /= np.linalg.norm(x)
        w[k] = lam
        vecs[:, k] = x
        if size == 2:
            w[k + 1] = lam.conjugate()
            vecs[:, k + 1] = x.conjugate()
    return w, vecs


def eigvals(a: np.ndarray) -> np.ndarray:
    return eig(a)[0]
