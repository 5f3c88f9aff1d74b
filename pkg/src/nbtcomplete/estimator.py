"""Model parameters, singular value / left vector estimates and overlap predictions."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .nbt_operator import TwoPathSet, apply_S, apply_S_delta
from .rng import stream
from .synth import GroundTruth

log = logging.getLogger(__name__)

GRAM_TOL = 1e-8
INEQ_RTOL = 1e-12


class ParameterError(ValueError):
    pass


class SeriesDivergence(ArithmeticError):
    pass


class VarianceOperator:
    """Matrix-free ``Q = sqrt(mn) (M o M)`` and ``Phi = Q Q^T`` from the rank-r factors.

    ``M o M = F diag(c) G^T`` where the columns of F (resp. G) are the
    Hadamard products ``phi_i o phi_j`` (resp. ``psi_i o psi_j``) and
    ``c_ij = nu_i nu_j``.
    """

    def __init__(self, gt: GroundTruth):
        r = gt.r
        ii, jj = np.divmod(np.arange(r * r), r)
        self.n, self.m = gt.n, gt.m
        self.F = (gt.phi[ii] * gt.phi[jj]).T
        self.G = (gt.psi[ii] * gt.psi[jj]).T
        self.c = math.sqrt(gt.n * gt.m) * gt.nu[ii] * gt.nu[jj]
        self.gram_F = self.F.T @ self.F
        self.gram_G = self.G.T @ self.G
        # Phi = F core F^T, Phi~ = Q^T Q = G core_t G^T
        self.core = self.c[:, None] * self.gram_G * self.c[None, :]
        self.core_t = self.c[:, None] * self.gram_F * self.c[None, :]

    def q_apply(self, w: np.ndarray) -> np.ndarray:
        return self.F @ (self.c * (self.G.T @ w))

    def qt_apply(self, v: np.ndarray) -> np.ndarray:
        return self.G @ (self.c * (self.F.T @ v))

    def phi_apply(self, v: np.ndarray) -> np.ndarray:
        return self.F @ (self.core @ (self.F.T @ v))

    def phi_power_diag(self, t: int) -> np.ndarray:
        """Diagonal of Phi^t (t >= 1)."""
        mid = self.core @ np.linalg.matrix_power(self.gram_F @ self.core, t - 1)
        return np.einsum("xa,ab,xb->x", self.F, mid, self.F)

    def phi_tilde_power_diag(self, t: int) -> np.ndarray:
        """Diagonal of (Q^T Q)^t (t >= 1), length m."""
        mid = self.core_t @ np.linalg.matrix_power(self.gram_G @ self.core_t, t - 1)
        out = np.empty(self.m)
        step = max(1, 2_000_000 // max(1, mid.shape[0]))
        for lo in range(0, self.m, step):
            g = self.G[lo:lo + step]
            out[lo:lo + step] = np.einsum("ya,ab,yb->y", g, mid, g)
        return out

    def dense_Q(self, cap: int = 10**6) -> np.ndarray:
        if self.n * self.m > cap:
            raise ParameterError("dense Q too large")
        return (self.F * self.c) @ self.G.T


def spectral_radius_power(op, n: int, seed: int = 0, rtol: float = 1e-10, max_iter: int = 20000):
    """Largest eigenvalue of a symmetric nonnegative PSD operator by power iteration.

    Returns ``(value, converged)``. Stops when the Rayleigh quotient moves by
    less than ``rtol**1.5`` relative, which leaves an error well under ``rtol``.
    """
    v = np.abs(stream(seed, 0x52484F).standard_normal(n)) + 1e-3
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        w = op(v)
        new = float(v @ w)
        nrm = float(np.linalg.norm(w))
        if nrm == 0.0:
            return 0.0, True
        v = w / nrm
        if abs(new - lam) <= rtol**1.5 * abs(new):
            return new, True
        lam = new
    return lam, False


def max_abs_entry(gt: GroundTruth, chunk: int = 4_000_000) -> float:
    if gt.r == 1:
        return float(gt.nu[0] * np.abs(gt.phi[0]).max() * np.abs(gt.psi[0]).max())
    rows = max(1, chunk // gt.m)
    best = 0.0
    left = gt.phi.T * gt.nu
    for lo in range(0, gt.n, rows):
        best = max(best, float(np.abs(left[lo:lo + rows] @ gt.psi).max()))
    return best


@dataclass
class ModelParams:
    n: int
    m: int
    d: float
    r: int
    nu: list
    rho: float
    L: float
    K: float
    eta: float
    kappa: float
    theta1: float
    theta2: float
    theta: float
    r0: int
    tau: list
    epsilon: float
    ell: int
    ell_clamped: bool = False
    rho_converged: bool = True

    def to_dict(self) -> dict:
        return asdict(self)


def compute_params(gt: GroundTruth, d: float, epsilon: float | None = None, ell: int | None = None,
                   seed: int = 0) -> ModelParams:
    """Threshold and complexity parameters of an instance.

    ``ell = floor(epsilon * log_d n)`` with ``epsilon = min(eta/2, 1)/25``
    unless overridden, clamped to at least 1.
    """
    if not d > 1:
        raise ParameterError(f"d must be > 1, got {d}")
    dev = gt.gram_deviation()
    if dev > GRAM_TOL:
        raise ParameterError(f"factors not orthonormal (Gram deviation {dev:.3g})")
    n, m = gt.n, gt.m
    var = VarianceOperator(gt)
    rho2, ok = spectral_radius_power(var.phi_apply, n, seed=seed)
    if not ok and n * m <= 10**6:
        rho2 = float(np.linalg.norm(var.dense_Q(), 2)) ** 2
        ok = True
    if not ok:
        log.warning("power iteration for rho did not converge")
    rho = math.sqrt(rho2)
    L = math.sqrt(n * m) * max_abs_entry(gt)
    eta = math.log(m) / math.log(n) - 1.0
    kappa = math.sqrt(n) * float(np.abs(gt.phi).max())
    theta1 = math.sqrt(rho / d)
    theta2 = L / d
    theta = max(theta1, theta2)
    nu = gt.nu
    r0 = int(np.sum(nu >= theta))
    tau = [theta / float(v) for v in nu[:r0]]
    eps = epsilon if epsilon is not None else min(eta / 2.0, 1.0) / 25.0
    clamped = False
    if ell is None:
        ell = math.floor(eps * math.log(n) / math.log(d))
        if ell < 1:
            ell, clamped = 1, True
    return ModelParams(
        n=n, m=m, d=float(d), r=gt.r, nu=[float(v) for v in nu], rho=rho, L=L, K=L**2 / rho,
        eta=eta, kappa=kappa, theta1=theta1, theta2=theta2, theta=theta, r0=r0, tau=tau,
        epsilon=eps, ell=int(ell), ell_clamped=clamped, rho_converged=ok,
    )


def check_parameter_inequalities(params: ModelParams, gt: GroundTruth, t_max: int = 3) -> dict:
    """Evaluate the elementary parameter inequalities with their slack.

    Maxima of Phi^t and (Q^T Q)^t are read off their diagonals: both are
    PSD with nonnegative entries, so the largest entry sits on the diagonal.
    """
    var = VarianceOperator(gt)
    rho, K, n, m = params.rho, params.K, gt.n, gt.m
    fro2 = float(np.sum(gt.nu**2))
    checks = []

    def add(name, value, bound, kind="le"):
        if kind == "le":
            ok = value <= bound * (1 + INEQ_RTOL) + 1e-300
            slack = bound - value
        else:
            ok = value >= bound * (1 - INEQ_RTOL)
            slack = value - bound
        checks.append({"name": name, "value": float(value), "bound": float(bound),
                       "slack": float(slack), "ok": bool(ok)})

    add("K>=1", K, 1.0, "ge")
    add("rho>=|M|_F^2", rho, fro2, "ge")
    add("|M|_F^2>=nu1^2", fro2, float(gt.nu[0] ** 2), "ge")
    add("max Phi_xy<=K^2 rho^2/n", float(var.phi_power_diag(1).max()), K**2 * rho**2 / n)
    for t in range(1, t_max + 1):
        add(f"max (Phi^{t})_xy<=K^2 rho^{2 * t}/n", float(var.phi_power_diag(t).max()), K**2 * rho ** (2 * t) / n)
        add(f"max (PhiT^{t})_yz<=K^2 rho^{2 * t}/m", float(var.phi_tilde_power_diag(t).max()), K**2 * rho ** (2 * t) / m)
    return {"checks": checks, "violations": sum(not c["ok"] for c in checks)}


@dataclass
class GammaMatrix:
    t: int
    indices: list
    values: np.ndarray


def compute_gamma_matrix(gt: GroundTruth, d: float, t: int, indices=None) -> GammaMatrix:
    """``Gamma_ij = sum_{s<=t} <1, Phi^s (phi_i o phi_j)> / (nu_i nu_j d)^(2s)``, matrix-free."""
    if t < 0:
        raise ValueError("t must be >= 0")
    idx = list(range(gt.r)) if indices is None else [int(i) for i in indices]
    var = VarianceOperator(gt)
    out = np.zeros((len(idx), len(idx)))
    for a, i in enumerate(idx):
        for b, j in enumerate(idx[a:], start=a):
            vec = gt.phi[i] * gt.phi[j]
            scale = (gt.nu[i] * gt.nu[j] * d) ** 2
            total = vec.sum()
            for _ in range(t):
                vec = var.q_apply(var.qt_apply(vec)) / scale
                total += vec.sum()
            out[a, b] = out[b, a] = total
    return GammaMatrix(t, idx, out)


@dataclass
class GammaPrediction:
    gamma: float
    overlap: float
    ratio: float
    terms: int
    variant: str
    homogeneous_gamma: float | None = None


def predict_gamma(gt: GroundTruth, d: float, i: int, params: ModelParams | None = None,
                  variant: str = "d2", max_terms: int = 10_000) -> GammaPrediction:
    """Resolvent overlap constant by Neumann summation.

    ``variant='d2'`` divides each order by ``nu_i^4 d^2`` (the limit of
    Gamma^(t)_ii); ``variant='d'`` divides by ``nu_i^4 d``.
    """
    if params is None:
        params = compute_params(gt, d)
    d_eff = d * d if variant == "d2" else float(d) if variant == "d" else None
    if d_eff is None:
        raise ValueError(f"unknown variant {variant!r}")
    nu4 = float(gt.nu[i]) ** 4
    ratio = params.rho**2 / (nu4 * d_eff)
    if ratio >= 1.0:
        raise SeriesDivergence(f"Neumann series diverges: rho^2/(nu_{i}^4 d_eff) = {ratio:.6g} >= 1")
    var = VarianceOperator(gt)
    vec = gt.phi[i] * gt.phi[i]
    total = float(vec.sum())
    terms = 1
    while terms < max_terms:
        vec = var.phi_apply(vec) / (nu4 * d_eff)
        term = float(vec.sum())
        total += term
        terms += 1
        if abs(term) < 1e-12 * abs(total):
            break
    homog = None
    if gt.homogeneous and i < params.r0:
        tau4 = params.tau[i] ** 4
        homog = 1.0 / (1.0 - tau4) if variant == "d2" else 1.0 / (1.0 - tau4 * d)
    return GammaPrediction(total, 1.0 / math.sqrt(total), ratio, terms, variant, homog)


def estimate_singular_values(summary) -> tuple[np.ndarray, np.ndarray]:
    """``nu_hat = sqrt(max(Re lam, 0))`` per outlier, plus suspect flags.

    A pair is suspect when ``|Im lam| > 0.1 |lam|`` or ``Re lam < 0``.
    """
    lams = np.array([p.lam for p in summary.outliers], dtype=complex)
    nu_hat = np.sqrt(np.maximum(lams.real, 0.0))
    suspect = (np.abs(lams.imag) > 0.1 * np.abs(lams)) | (lams.real < 0)
    return nu_hat, suspect


def _realify(v: np.ndarray):
    """Rotate a complex vector so its largest entry is real positive; return (real part, imag ratio)."""
    if not np.iscomplexobj(v):
        return np.asarray(v, dtype=float), 0.0
    j = int(np.argmax(np.abs(v)))
    if abs(v[j]) > 0:
        v = v * (abs(v[j]) / v[j])
    nrm = np.linalg.norm(v)
    ratio = float(np.linalg.norm(v.imag) / nrm) if nrm > 0 else 0.0
    return v.real.copy(), ratio


@dataclass
class RecoveryEstimate:
    lam: list
    nu_hat: np.ndarray
    suspect: np.ndarray
    zeta_R: list = field(repr=False)  # raw S_delta xi^R
    zeta_L: list = field(repr=False)  # raw S xi^L
    zeta_R_unit: list = field(repr=False)
    zeta_L_unit: list = field(repr=False)
    s_norm_R: list = field(default_factory=list, repr=False)  # ||S xi^R||
    imag_ratio: list = field(default_factory=list)
    zeta_L_T_unit: list = field(default_factory=list, repr=False)  # T^T xi^L, normalized


def _unit(v):
    nrm = np.linalg.norm(v)
    return v / nrm if nrm > 0 else v.copy()


def extract_left_vectors(tp: TwoPathSet, pairs, terminal: list | None = None) -> tuple[list, list, list, list, list, list]:
    """Pull eigenvectors of B back to left vertices.

    ``zeta_R = S_delta xi^R`` and ``zeta_L = S xi^L``. Returns raw and
    unit-normalized copies, ``||S xi^R||`` and the imaginary-part ratio.
    If ``terminal`` is a list it receives the unit vectors ``T^T xi^L``
    (sum over paths ending at x), the pull-back that matches ``J_delta xi^R``.
    """
    zr, zl, zr_u, zl_u, s_norm, imag = [], [], [], [], [], []
    for p in pairs:
        if p.right_vec.shape[0] != len(tp):
            raise ValueError("eigenvector length does not match two-path set")
        xr, ir = _realify(p.right_vec)
        a = apply_S_delta(tp, xr)
        s_norm.append(float(np.linalg.norm(apply_S(tp, xr))))
        if p.left_vec is not None:
            xl, il = _realify(p.left_vec)
            b = apply_S(tp, xl)
            bt = np.bincount(tp.e3, weights=xl, minlength=tp.n)
        else:
            b, bt, il = np.zeros(tp.n), np.zeros(tp.n), 0.0
        if terminal is not None:
            terminal.append(_unit(bt))
        zr.append(a)
        zl.append(b)
        zr_u.append(_unit(a))
        zl_u.append(_unit(b))
        imag.append(max(ir, il))
        if p.lam.imag == 0.0 and max(ir, il) > 1e-6:
            log.warning("eigenvector for real eigenvalue %s has imaginary part ratio %.3g", p.lam, max(ir, il))
    return zr, zl, zr_u, zl_u, s_norm, imag


def build_estimate(tp: TwoPathSet, summary) -> RecoveryEstimate:
    nu_hat, suspect = estimate_singular_values(summary)
    terminal = []
    zr, zl, zr_u, zl_u, s_norm, imag = extract_left_vectors(tp, summary.outliers, terminal)
    return RecoveryEstimate([p.lam for p in summary.outliers], nu_hat, suspect,
                            zr, zl, zr_u, zl_u, s_norm, imag, terminal)


def relative_eigengap(nu: np.ndarray, i: int, ell: int) -> float:
    others = [v for v in nu if not math.isclose(v, nu[i], rel_tol=1e-10)]
    if not others:
        return math.inf
    return min(abs(1.0 - (v / nu[i]) ** (2 * ell)) for v in others)


def _eigenspace_overlap(z: np.ndarray, gt: GroundTruth, i: int) -> float:
    same = [j for j in range(gt.r) if math.isclose(gt.nu[j], gt.nu[i], rel_tol=1e-10)]
    if len(same) == 1:
        return abs(float(z @ gt.phi[i]))
    return float(np.linalg.norm(gt.phi[same] @ z))


def evaluate_recovery(est: RecoveryEstimate, gt: GroundTruth, params: ModelParams,
                      variant: str = "d2") -> dict:
    """Score each outlier against the ground truth (overlaps are sign-aligned, in [0, 1])."""
    rows = []
    for i in range(len(est.lam)):
        row = {"index": i, "lam_re": est.lam[i].real, "lam_im": est.lam[i].imag,
               "nu_hat": float(est.nu_hat[i]), "suspect": bool(est.suspect[i])}
        if i < gt.r:
            ov_r = _eigenspace_overlap(est.zeta_R_unit[i], gt, i)
            ov_l = _eigenspace_overlap(est.zeta_L_unit[i], gt, i)
            raw = float(est.zeta_R[i] @ gt.phi[i])
            ov_sketch = abs(raw) / est.s_norm_R[i] if est.s_norm_R[i] > 0 else 0.0
            row.update(
                nu=float(gt.nu[i]),
                sv_rel_err=abs(float(est.nu_hat[i]) - gt.nu[i]) / gt.nu[i],
                overlap_R=ov_r,
                overlap_L=ov_l,
                overlap_R_sketch_norm=ov_sketch,
                overlap_L_terminal=(_eigenspace_overlap(est.zeta_L_T_unit[i], gt, i)
                                    if est.zeta_L_T_unit else math.nan),
                gamma_obs=1.0 / ov_r**2 if ov_r > 0 else math.inf,
                eigengap=relative_eigengap(gt.nu, i, params.ell),
            )
            try:
                pred = predict_gamma(gt, params.d, i, params, variant=variant)
                row.update(gamma_pred=pred.gamma, overlap_pred=pred.overlap,
                           gamma_homogeneous=pred.homogeneous_gamma)
            except SeriesDivergence as exc:
                row.update(gamma_pred=math.nan, overlap_pred=math.nan, gamma_error=str(exc))
        rows.append(row)
    return {"outliers": rows}


def params_recovery_json(params: ModelParams | None, est: RecoveryEstimate | None, report: dict | None) -> dict:
    """Flat key-value document with the documented keys."""
    doc = {}
    if params is not None:
        for key in ("rho", "L", "K", "eta", "kappa", "theta1", "theta2", "theta", "r0", "tau", "ell"):
            doc[key] = getattr(params, key)
        doc["ell_clamped"] = params.ell_clamped
    if est is not None:
        doc["nu_hat"] = [float(v) for v in est.nu_hat]
        doc["lambda_re"] = [float(v.real) for v in est.lam]
        doc["lambda_im"] = [float(v.imag) for v in est.lam]
    if report is not None:
        rows = report["outliers"]
        for key in ("overlap_R", "overlap_L", "gamma_pred", "gamma_obs"):
            doc[key] = [r.get(key, math.nan) for r in rows]
    return doc


def dumps(doc: dict) -> str:
    return json.dumps(doc, indent=2, sort_keys=True, default=_json_default, allow_nan=True) + "\n"


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, complex):
        return [o.real, o.imag]
    raise TypeError(f"cannot serialize {type(o)}")
