"""Command-line harness.

Exit codes: 0 ok, 1 config error, 2 solver warning (partial outputs written),
3 internal error.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import math
import statistics
import sys
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import estimator as est
from . import oracle, selftest
from .baseline import truncated_svd_baseline
from .harness import (
    InstanceSpec, SolverSpec, blind_estimate, make_ground_truth, run_instance, scored_estimate, spectrum_rows,
)
from .sparse_core import read_observed, write_observed
from .synth import read_ground_truth, write_ground_truth

log = logging.getLogger("nbtcomplete")

MODES = ("selftest", "synth-run", "estimate", "sweep-d", "compare-svd", "gw-check")
EXIT_OK, EXIT_CONFIG, EXIT_WARN, EXIT_INTERNAL = 0, 1, 2, 3

SPECTRUM_COLUMNS = ("re", "im", "modulus", "outlier")
SWEEP_COLUMNS = ("d", "seed", "nu_hat", "overlap_R", "overlap_L", "overlap_pred", "bulk_radius", "theta")
COMPARE_COLUMNS = ("d", "seed", "overlap_R", "overlap_svd", "nu_hat", "sigma_svd")
GW_COLUMNS = ("kind", "t", "i", "j", "mean", "se", "target", "z", "ok")

KNOWN = {
    "run": {"mode", "out", "threads", "seed", "seeds", "n_seeds", "save_inputs"},
    "instance": {"n", "m", "k_order", "r", "nu", "vector_mode", "kappa_target", "sampler", "d", "d_list"},
    "solver": {"k", "krylov_dim", "tol", "max_restarts", "variant", "epsilon", "ell"},
    "estimate": {"observed", "ground_truth", "k", "min_ratio"},
    "gw": {"d", "samples", "t_max", "root"},
}


class ConfigError(ValueError):
    def __init__(self, key, msg):
        super().__init__(f"{key}: {msg}")
        self.key = key


@dataclass
class RunConfig:
    mode: str
    out: Path
    threads: int = 1
    seeds: list = field(default_factory=lambda: [0])
    save_inputs: bool = False
    instance: InstanceSpec | None = None
    solver: SolverSpec = field(default_factory=SolverSpec)
    d: float | None = None
    d_list: list = field(default_factory=list)
    estimate: dict = field(default_factory=dict)
    gw: dict = field(default_factory=dict)


def _floats(text):
    return [float(t) for t in text.replace(",", " ").split()]


def _ints(text):
    return [int(t) for t in text.replace(",", " ").split()]


def _get(sec, key, conv, default=None, section="?"):
    if sec is None or key not in sec:
        return default
    raw = sec[key].strip()
    try:
        return conv(raw)
    except ValueError as exc:
        raise ConfigError(f"{section}.{key}", f"cannot parse {raw!r} ({exc})") from None


def _bool(text):
    t = text.lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected a boolean")


def load_config(path: str | None, overrides: dict) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    if path is not None:
        if not Path(path).is_file():
            raise ConfigError("--config", f"file not found: {path}")
        try:
            cp.read(path)
        except configparser.Error as exc:
            raise ConfigError("--config", str(exc)) from None
    for name in cp.sections():
        if name not in KNOWN:
            raise ConfigError(name, "unknown section")
        for key in cp[name]:
            if key not in KNOWN[name]:
                raise ConfigError(f"{name}.{key}", "unknown key")
    run = cp["run"] if cp.has_section("run") else None
    inst = cp["instance"] if cp.has_section("instance") else None
    sol = cp["solver"] if cp.has_section("solver") else None

    mode = overrides.get("mode") or _get(run, "mode", str, section="run")
    if mode is None:
        raise ConfigError("run.mode", "missing (set in config or with --mode)")
    if mode not in MODES:
        raise ConfigError("run.mode", f"unknown mode {mode!r}; expected one of {', '.join(MODES)}")
    out = overrides.get("out") or _get(run, "out", str, "out", section="run")
    threads = overrides.get("threads") or _get(run, "threads", int, 1, section="run")
    if threads < 1:
        raise ConfigError("run.threads", "must be >= 1")
    seed = overrides.get("seed")
    if seed is None:
        seed = _get(run, "seed", int, 0, section="run")
    seeds = _get(run, "seeds", _ints, None, section="run")
    n_seeds = _get(run, "n_seeds", int, None, section="run")
    if overrides.get("seed") is not None or seeds is None:
        seeds = list(range(seed, seed + (n_seeds or 1)))
    cfg = RunConfig(mode=mode, out=Path(out), threads=threads, seeds=seeds,
                    save_inputs=_get(run, "save_inputs", _bool, False, section="run"))

    if inst is not None:
        n = _get(inst, "n", int, None, section="instance")
        cfg.instance = InstanceSpec(
            n=n if n is not None else 0,
            m=_get(inst, "m", int, None, section="instance"),
            k_order=_get(inst, "k_order", int, None, section="instance"),
            r=_get(inst, "r", int, 1, section="instance"),
            nu=tuple(_get(inst, "nu", _floats, [1.0], section="instance")),
            vector_mode=_get(inst, "vector_mode", str, "uniform-sign", section="instance"),
            kappa_target=_get(inst, "kappa_target", float, None, section="instance"),
            sampler=_get(inst, "sampler", str, "exact-Bernoulli", section="instance"),
        )
        cfg.d = _get(inst, "d", float, None, section="instance")
        cfg.d_list = _get(inst, "d_list", _floats, [], section="instance")
    if sol is not None:
        cfg.solver = SolverSpec(
            k=_get(sol, "k", int, None, section="solver"),
            krylov_dim=_get(sol, "krylov_dim", int, None, section="solver"),
            tol=_get(sol, "tol", float, 1e-8, section="solver"),
            max_restarts=_get(sol, "max_restarts", int, 200, section="solver"),
            variant=_get(sol, "variant", str, "d2", section="solver"),
            epsilon=_get(sol, "epsilon", float, None, section="solver"),
            ell=_get(sol, "ell", int, None, section="solver"),
        )
    if cp.has_section("estimate"):
        e = cp["estimate"]
        cfg.estimate = {
            "observed": _get(e, "observed", str, None, section="estimate"),
            "ground_truth": _get(e, "ground_truth", str, None, section="estimate"),
            "k": _get(e, "k", int, 8, section="estimate"),
            "min_ratio": _get(e, "min_ratio", float, 2.0, section="estimate"),
        }
    if cp.has_section("gw"):
        g = cp["gw"]
        cfg.gw = {
            "d": _get(g, "d", float, None, section="gw"),
            "samples": _get(g, "samples", int, 10_000, section="gw"),
            "t_max": _get(g, "t_max", int, 2, section="gw"),
            "root": _get(g, "root", int, 0, section="gw"),
        }
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    mode = cfg.mode
    if mode in ("synth-run", "sweep-d", "compare-svd", "gw-check"):
        inst = cfg.instance
        if inst is None or inst.n <= 0:
            raise ConfigError("instance.n", f"required for mode {mode}")
        if inst.m is None and inst.k_order is None:
            raise ConfigError("instance.m", "either m or k_order is required")
        if inst.sampler not in ("exact-Bernoulli", "fixed-count"):
            raise ConfigError("instance.sampler", f"unknown sampler {inst.sampler!r}")
        if inst.vector_mode not in ("uniform-sign", "random-orthonormal", "localized"):
            raise ConfigError("instance.vector_mode", f"unknown mode {inst.vector_mode!r}")
    if mode in ("synth-run", "compare-svd") and cfg.d is None:
        raise ConfigError("instance.d", f"required for mode {mode}")
    if mode == "sweep-d":
        if not cfg.d_list:
            raise ConfigError("instance.d_list", "required for mode sweep-d")
        if any(b <= a for a, b in zip(cfg.d_list, cfg.d_list[1:])):
            raise ConfigError("instance.d_list", "must be strictly increasing")
    if mode == "gw-check" and cfg.gw.get("d") is None and cfg.d is None:
        raise ConfigError("gw.d", "required for mode gw-check")
    if mode == "estimate" and not cfg.estimate.get("observed"):
        raise ConfigError("estimate.observed", "required for mode estimate")
    if cfg.solver.variant not in ("d2", "d"):
        raise ConfigError("solver.variant", "must be d2 or d")
    if cfg.solver.tol <= 0:
        raise ConfigError("solver.tol", "must be positive")
    for d in ([cfg.d] if cfg.d is not None else []) + list(cfg.d_list):
        if not d > 1:
            raise ConfigError("instance.d", f"d must be > 1, got {d}")


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if v is None:
        return "nan"
    return f"{float(v):.17g}"


def write_csv(path: Path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([v if isinstance(v, str) else _fmt(v) for v in row])


def write_json(path: Path, doc: dict) -> None:
    path.write_text(est.dumps(doc))


def _map(cfg: RunConfig, fn, items):
    # results come back in submission order whatever the schedule
    if cfg.threads == 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=cfg.threads) as ex:
        return list(ex.map(fn, items))


def mode_selftest(cfg: RunConfig) -> int:
    lines = []
    ok = selftest.run_all(verbose=True, out=lambda s: (print(s), lines.append(s)))
    cfg.out.mkdir(parents=True, exist_ok=True)
    (cfg.out / "selftest.txt").write_text("\n".join(lines) + "\n")
    print(f"selftest: {'all checks passed' if ok else 'FAILURES'}")
    return EXIT_OK if ok else EXIT_INTERNAL


def _recovery_doc(res) -> dict:
    doc = est.params_recovery_json(res.params, res.estimate, res.report)
    doc.update(
        seed=res.seed,
        d=res.d,
        bulk_radius=res.summary.bulk_radius,
        bulk_ratio=res.summary.bulk_ratio,
        overlap_L_terminal=[r.get("overlap_L_terminal", math.nan) for r in res.report["outliers"]],
        outliers=res.report["outliers"],
        solver={"restarts": res.spectrum.restarts, "applies": res.spectrum.n_applies,
                "converged": [p.converged for p in res.spectrum.pairs],
                "residuals": [p.residual for p in res.spectrum.pairs]},
        n_two_paths=len(res.tp),
        nnz=res.obs.nnz,
        warnings=res.warnings,
    )
    return doc


def mode_synth_run(cfg: RunConfig) -> int:
    cfg.out.mkdir(parents=True, exist_ok=True)
    seed = cfg.seeds[0]
    res = run_instance(cfg.instance, cfg.solver, cfg.d, seed)
    pdoc = res.params.to_dict()
    pdoc["inequalities"] = est.check_parameter_inequalities(res.params, res.gt)
    write_json(cfg.out / "params.json", pdoc)
    write_csv(cfg.out / "spectrum.csv", SPECTRUM_COLUMNS, spectrum_rows(res.spectrum, res.params.r0))
    write_json(cfg.out / "recovery.json", _recovery_doc(res))
    if cfg.save_inputs:
        write_observed(res.obs, cfg.out / "observed.txt")
        write_ground_truth(res.gt, cfg.out / "ground_truth.txt")
    for row in res.report["outliers"]:
        print(f"lambda={row['lam_re']:.6g}{row['lam_im']:+.6g}i nu_hat={row['nu_hat']:.6g} "
              f"overlap_R={row.get('overlap_R', math.nan):.4f} pred={row.get('overlap_pred', math.nan):.4f}")
    for w in res.warnings:
        log.warning(w)
    return EXIT_WARN if res.warnings else EXIT_OK


def sweep_row(res) -> tuple:
    return (res.d, res.seed, res.first("nu_hat"), res.first("overlap_R"), res.first("overlap_L"),
            res.first("overlap_pred"), res.summary.bulk_radius, res.params.theta)


def mode_sweep(cfg: RunConfig) -> int:
    cfg.out.mkdir(parents=True, exist_ok=True)
    jobs = [(d, s) for d in cfg.d_list for s in cfg.seeds]
    results = _map(cfg, lambda job: run_instance(cfg.instance, cfg.solver, job[0], job[1]), jobs)
    write_csv(cfg.out / "sweep.csv", SWEEP_COLUMNS, [sweep_row(r) for r in results])
    summary = []
    for d in cfg.d_list:
        rs = [r for r in results if r.d == d]
        ov = [r.first("overlap_R") for r in rs]
        entry = {"d": d, "median_overlap_R": statistics.median(ov), "overlap_pred_d2": rs[0].first("overlap_pred")}
        try:
            entry["overlap_pred_d"] = est.predict_gamma(rs[0].gt, d, 0, rs[0].params, variant="d").overlap
        except est.SeriesDivergence:
            entry["overlap_pred_d"] = math.nan
        entry["closer_variant"] = min(("d2", "d"), key=lambda v: abs(entry[f"overlap_pred_{v}"] - entry["median_overlap_R"])
                                      if math.isfinite(entry[f"overlap_pred_{v}"]) else math.inf)
        summary.append(entry)
        print(f"d={d:g} median overlap_R={entry['median_overlap_R']:.4f} pred(d2)={entry['overlap_pred_d2']:.4f} "
              f"pred(d)={entry['overlap_pred_d']:.4f}")
    write_json(cfg.out / "sweep_summary.json", {"by_d": summary})
    warn = [w for r in results for w in r.warnings]
    for w in warn:
        log.warning(w)
    return EXIT_WARN if warn else EXIT_OK


def mode_compare(cfg: RunConfig) -> int:
    cfg.out.mkdir(parents=True, exist_ok=True)

    def job(seed):
        res = run_instance(cfg.instance, cfg.solver, cfg.d, seed)
        svd = truncated_svd_baseline(res.obs, 1, seed=seed)
        ov = abs(float(svd.left[0] @ res.gt.phi[0]))
        return res, (res.d, seed, res.first("overlap_R"), ov, res.first("nu_hat"), float(svd.singular_values[0])), svd.converged

    out = _map(cfg, job, cfg.seeds)
    write_csv(cfg.out / "compare.csv", COMPARE_COLUMNS, [o[1] for o in out])
    warn = [w for o in out for w in o[0].warnings] + ["svd baseline not converged" for o in out if not o[2]]
    for w in warn:
        log.warning(w)
    return EXIT_WARN if warn else EXIT_OK


def mode_gw(cfg: RunConfig) -> int:
    cfg.out.mkdir(parents=True, exist_ok=True)
    gw = {"samples": 10_000, "t_max": 2, "root": 0, "d": None, **cfg.gw}
    d = gw["d"] if gw["d"] is not None else cfg.d
    seed = cfg.seeds[0]
    gt = make_ground_truth(cfg.instance, seed)
    rows = oracle.check_functional_moments(gt, d, gw["root"], tuple(range(gw["t_max"] + 1)), gw["samples"], seed)
    write_csv(cfg.out / "gw_check.csv", GW_COLUMNS,
              [tuple(r[c] for c in GW_COLUMNS) for r in rows])
    counts = np.array([oracle.sample_gw_tree(gt, d, 1, gw["root"], seed, gen=oracle.stream(seed, 0x4348, s)).children_count()[0]
                       for s in range(gw["samples"])])
    stat, pval = oracle.poisson_chi2(counts, d * d)
    odd_ok = True
    for s in range(20):
        t = oracle.sample_gw_tree(gt, d, 5, gw["root"], seed, gen=oracle.stream(seed, 0x4F44, s))
        kids = t.children_count()
        odd_ok &= bool(np.all(kids[(t.depth % 2 == 1) & (t.depth < 5)] == 1))
    doc = {"chi2": stat, "p_value": pval, "chi2_ok": pval >= 1e-3, "odd_single_child": odd_ok,
           "moments_ok": all(r["ok"] for r in rows), "mean_root_offspring": float(counts.mean())}
    write_json(cfg.out / "gw_check.json", doc)
    ok = doc["chi2_ok"] and odd_ok and doc["moments_ok"]
    print(f"gw-check: moments {'ok' if doc['moments_ok'] else 'FAIL'}, chi2 p={pval:.4g}, odd-depth {'ok' if odd_ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_INTERNAL


def mode_estimate(cfg: RunConfig) -> int:
    cfg.out.mkdir(parents=True, exist_ok=True)
    e = cfg.estimate
    obs = read_observed(e["observed"])
    seed = cfg.seeds[0]
    gt = read_ground_truth(e["ground_truth"]) if e.get("ground_truth") else None
    if gt is None:
        tp, spec, summary, estimate = blind_estimate(obs, e["k"], cfg.solver, seed, e["min_ratio"])
        r0 = len(summary.outliers)
        write_csv(cfg.out / "spectrum.csv", SPECTRUM_COLUMNS, spectrum_rows(spec, r0))
        doc = est.params_recovery_json(None, estimate, None)
        doc.update(r0_gap=r0, bulk_radius=summary.bulk_radius, blind=True)
        warn = [] if all(p.converged for p in summary.outliers) else ["outlier eigenpair not converged"]
    else:
        params, tp, spec, summary, estimate, report = scored_estimate(obs, gt, cfg.solver, seed)
        write_json(cfg.out / "params.json", params.to_dict())
        write_csv(cfg.out / "spectrum.csv", SPECTRUM_COLUMNS, spectrum_rows(spec, params.r0))
        doc = est.params_recovery_json(params, estimate, report)
        doc.update(outliers=report["outliers"], bulk_radius=summary.bulk_radius, blind=False)
        warn = [] if all(p.converged for p in summary.outliers) and not summary.partial else ["outlier eigenpair not converged"]
    rows = [[x] + [v[x] for v in estimate.zeta_R_unit] for x in range(obs.n)]
    write_csv(cfg.out / "left_vectors.csv", ["x"] + [f"zeta_R_{i + 1}" for i in range(len(estimate.zeta_R_unit))], rows)
    write_json(cfg.out / "recovery.json", doc)
    for w in warn:
        log.warning(w)
    return EXIT_WARN if warn else EXIT_OK


DISPATCH = {
    "selftest": mode_selftest,
    "synth-run": mode_synth_run,
    "estimate": mode_estimate,
    "sweep-d": mode_sweep,
    "compare-svd": mode_compare,
    "gw-check": mode_gw,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nbtcomplete", description="Non-backtracking spectral completion of long low-rank matrices.")
    p.add_argument("--config", help="INI-style config file")
    p.add_argument("--mode", choices=MODES, help="overrides run.mode")
    p.add_argument("--out", help="output directory (overrides run.out)")
    p.add_argument("--threads", type=int, help="parallel jobs over seeds")
    p.add_argument("--seed", type=int, help="base seed (overrides run.seed / run.seeds)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, {"mode": args.mode, "out": args.out, "threads": args.threads, "seed": args.seed})
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return DISPATCH[cfg.mode](cfg)
    except Exception:
        traceback.print_exc()
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
