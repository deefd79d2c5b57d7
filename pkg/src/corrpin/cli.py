"""Command-line interface: ``corrpin <command> CONFIG [--out DIR] [--seed S] [--workers W]``.

The model and every command parameter come from a YAML config file (see
``configs/`` for commented examples).  Each run writes its outputs and a
``manifest.json`` into ``<out>/<command>-<spec hash>/``.  Identical manifests
give byte-identical outputs; the worker count never changes results.

Exit codes: 0 success, 2 config error, 3 numeric failure, 4 invariant violation.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .annealed import annealed_dp, fit_exponent
from .model import ModelError, ModelSpec, StateBudgetError, build_model, build_state_space
from .spectral import (
    ConvergenceError,
    ReducibilityError,
    annealed_critical_curve,
    annealed_spectrum,
    find_beta0,
    relevance_derivative,
    relevance_grid,
    small_beta_coefficient,
)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_INVARIANT = 0, 2, 3, 4
ENV_OUT = "CORRPIN_OUT"
MODEL_KEYS = ("alpha", "q", "ma_coeffs", "n_cut")
SECTIONS = ("annealed_curve", "relevance", "quenched", "sample", "validate")


_FE = {"beta_grid": None, "delta_grid": None, "N": None, "M": None}
#: Allowed keys per section; ``None`` marks a leaf, a dict a nested mapping.
SECTION_KEYS = {
    "annealed_curve": {
        "beta_grid": None, "small_beta": None, "slope_tolerance": None,
        "free_energy": _FE, "exponent_fit": {"beta": None, "deltas": None},
    },
    "relevance": {"beta_grid": None, "gamma_grid": None, "margin": None, "beta0": None, "beta0_bracket": None},
    "quenched": {
        "free_energy": _FE,
        "gap_scan": {"beta_grid": None, "delta_grid": None, "gamma_grid": None, "M": None,
                     "k_cap": None, "r_factor": None},
    },
    "sample": {
        "beta": None, "N": None, "n_paths": None, "dump": None, "transition_steps": None,
        "transition_paths": None, "laplace": {"n": None, "lambda": None, "n_paths": None},
    },
    "validate": {},
}


class ConfigError(ValueError):
    pass


class InvariantViolation(RuntimeError):
    pass


# --------------------------------------------------------------------- config


def load_config(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = yaml.safe_load(fh)
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a mapping")
    allowed = set(MODEL_KEYS) | {"seed", "out_dir"} | set(SECTIONS)
    unknown = sorted(set(cfg) - allowed)
    if unknown:
        hint = " (correlations are given through ma_coeffs only)" if "rho" in unknown else ""
        raise ConfigError(f"unknown config keys {unknown}{hint}")
    for name in SECTIONS:
        _check_keys(cfg.get(name), SECTION_KEYS[name], name)
    missing = [k for k in ("alpha", "q", "ma_coeffs") if k not in cfg]
    if missing:
        raise ConfigError(f"missing model keys {missing}")
    return cfg


def _check_keys(value, schema, where):
    if value is None or not isinstance(value, dict):
        return  # absent, or reported as a type error when the section is read
    unknown = sorted(set(value) - set(schema))
    if unknown:
        hint = " (correlations are given through ma_coeffs only)" if "rho" in unknown else ""
        raise ConfigError(f"unknown keys {unknown} in {where}{hint}")
    for key, sub in schema.items():
        if sub is not None:
            _check_keys(value.get(key), sub, f"{where}.{key}")


def model_from_config(cfg: dict, seed: int) -> ModelSpec:
    try:
        return build_model(
            float(cfg["alpha"]), int(cfg["q"]), [float(a) for a in cfg["ma_coeffs"]],
            n_cut=int(cfg.get("n_cut", 10_000)), seed=seed,
        )
    except (ModelError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid model: {exc}") from exc


def grid(value, name: str) -> list[float]:
    """A list of numbers, or ``{start, stop, num}`` with optional ``log: true``."""
    if isinstance(value, (int, float)):
        return [float(value)]
    if isinstance(value, list):
        return [float(v) for v in value]
    if isinstance(value, dict) and {"start", "stop", "num"} <= set(value):
        fn = np.geomspace if value.get("log", False) else np.linspace
        return [float(v) for v in fn(float(value["start"]), float(value["stop"]), int(value["num"]))]
    raise ConfigError(f"{name}: expected a number, a list or {{start, stop, num}}")


def section(cfg: dict, name: str) -> dict:
    sec = cfg.get(name) or {}
    if not isinstance(sec, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    return sec


# -------------------------------------------------------------------- output


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.17g}"
    return str(x)


class Output:
    """Serialized writer for one run directory."""

    def __init__(self, root: Path, command: str, spec: ModelSpec):
        self.spec = spec
        self.dir = Path(root) / f"{command}-{spec.content_hash}"
        self.dir.mkdir(parents=True, exist_ok=True)

    def path(self, stem: str, ext: str) -> Path:
        return self.dir / f"{stem}_{self.spec.content_hash}.{ext}"

    def csv(self, stem, header, rows) -> Path:
        p = self.path(stem, "csv")
        with open(p, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for r in rows:
                w.writerow([fmt(v) for v in r])
        return p

    def append_jsonl(self, stem, records) -> Path:
        p = self.path(stem, "jsonl")
        with open(p, "a", encoding="utf-8") as fh:
            for rec in records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        return p

    def reset(self, stem, ext):
        p = self.path(stem, ext)
        if p.exists():
            p.unlink()

    def json(self, stem, obj) -> Path:
        p = self.path(stem, "json")
        p.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")
        return p

    def manifest(self, command: str, cfg: dict, seed: int) -> Path:
        man = {
            "tool": "corrpin",
            "version": __version__,
            "command": command,
            "spec_hash": self.spec.content_hash,
            "seed": seed,
            "config": cfg,
        }
        p = self.dir / "manifest.json"
        p.write_text(json.dumps(man, sort_keys=True, indent=2) + "\n", encoding="utf-8")
        return p


def _pmap(fn, items, workers: int):
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(*it) for it in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, *zip(*items)))


def _float(sec, key, default):
    try:
        return float(sec.get(key, default))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: expected a number") from exc


def _int(sec, key, default):
    try:
        return int(sec.get(key, default))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: expected an integer") from exc


# ------------------------------------------------------------------ commands


def cmd_annealed_curve(spec, cfg, out: Output, seed, workers):
    sec = section(cfg, "annealed_curve")
    betas = grid(sec.get("beta_grid", {"start": 0.0, "stop": 2.0, "num": 21}), "beta_grid")
    ss = build_state_space(spec)
    pts = annealed_critical_curve(spec, betas, ss)
    out.csv("annealed_curve", ["beta", "lambda", "h_c_a"], [(p.beta, p.lam, p.h_c_a) for p in pts])

    b = _float(sec, "small_beta", 1e-3)
    tol = _float(sec, "slope_tolerance", 1e-3)
    coef = small_beta_coefficient(spec)
    hc = annealed_critical_curve(spec, [b], ss)[0].h_c_a
    ratio = hc / (-0.5 * b * b * coef)
    report = {"beta": b, "coefficient": coef, "ratio": ratio, "tolerance": tol,
              "within_tolerance": bool(abs(ratio - 1.0) <= tol)}

    fe = sec.get("free_energy")
    if fe:
        N = _int(fe, "N", 4096)
        rows = []
        for beta in grid(fe.get("beta_grid", [1.0]), "free_energy.beta_grid"):
            hc_b = annealed_critical_curve(spec, [beta], ss)[0].h_c_a
            for d in grid(fe.get("delta_grid", [0.0]), "free_energy.delta_grid"):
                dp = annealed_dp(spec, beta, hc_b + d, N, ss=ss)
                tr = dp.traces["full"]
                for n in sorted({N // 4, N // 2, N}):
                    rows.append((n, beta, hc_b + d, tr[n], tr[n] / n))
        out.csv("annealed_free_energy", ["N", "beta", "h", "logZ", "F_N"], rows)

    ef = sec.get("exponent_fit")
    if ef:
        beta = _float(ef, "beta", 1.0)
        deltas = grid(ef.get("deltas", {"start": 1e-6, "stop": 1e-5, "num": 8, "log": True}), "deltas")
        fit = fit_exponent(spec, beta, deltas, ss)
        expected = max(1.0, 1.0 / spec.alpha)
        report["exponent_fit"] = {
            "beta": beta, "slope": fit.slope, "intercept": fit.intercept, "r2": fit.r2,
            "expected": expected,
        }
    out.json("asymptote_report", report)
    return EXIT_OK


def _relevance_cell(spec, beta, gammas, margin):
    ss = build_state_space(spec)
    sd = annealed_spectrum(spec, beta, ss)
    der = relevance_derivative(spec, beta, ss, sd)
    certs = relevance_grid(spec, [beta], gammas, margin, ss) if gammas else []
    return sd.eigenvalue, der.direct, certs


def cmd_relevance(spec, cfg, out: Output, seed, workers):
    sec = section(cfg, "relevance")
    betas = grid(sec.get("beta_grid", {"start": 0.1, "stop": 3.0, "num": 30}), "beta_grid")
    gammas = grid(sec.get("gamma_grid", []), "gamma_grid")
    margin = _float(sec, "margin", 1e-6)
    results = _pmap(_relevance_cell, [(spec, b, gammas, margin) for b in betas], workers)
    rows, records = [], []
    for b, (lam, der, certs) in zip(betas, results):
        rows.append((b, lam, -0.5 * b * b - math.log(lam), der, int(der > 0)))
        for c in certs:
            records.append({"spec_hash": spec.content_hash, "beta": c.beta, "gamma": c.gamma,
                            "value": c.value, "verdict": c.verdict, "margin": c.margin})
    out.csv("relevance", ["beta", "lambda", "h_c_a", "dLambda_dgamma_at_1", "beta0_flag"], rows)
    out.reset("certificates", "jsonl")
    out.append_jsonl("certificates", records)
    if sec.get("beta0", True):
        lo, hi = sec.get("beta0_bracket", [0.0, 10.0])
        try:
            b0 = find_beta0(spec, (float(lo), float(hi)))
            out.json("beta0", {"beta0": b0, "bracket": [lo, hi], "found": True})
        except ModelError as exc:
            out.json("beta0", {"beta0": None, "bracket": [lo, hi], "found": False, "reason": str(exc)})
    return EXIT_OK


def _free_energy_cell(spec, beta, h, N, M, seed):
    from .quenched import quenched_free_energy

    est = quenched_free_energy(spec, beta, h, N, M, seed)
    fa = annealed_dp(spec, beta, h, N).log_z("full") / N
    return est, fa


def _gap_cell(spec, beta, deltas, gammas, M, seed, k_cap, r_factor):
    from .quenched import relevance_gap_scan

    return relevance_gap_scan(spec, [beta], deltas, gammas, M, seed, k_cap=k_cap,
                              r_factor=r_factor, keep_estimates=True)


def cmd_quenched(spec, cfg, out: Output, seed, workers):
    from .quenched import largest_certified

    sec = section(cfg, "quenched")
    status = EXIT_OK
    fe = sec.get("free_energy")
    if fe:
        N, M = _int(fe, "N", 2048), _int(fe, "M", 50)
        betas = grid(fe.get("beta_grid", [0.5]), "free_energy.beta_grid")
        deltas = grid(fe.get("delta_grid", [0.0]), "free_energy.delta_grid")
        curve = {p.beta: p.h_c_a for p in annealed_critical_curve(spec, betas)}
        cells = [(spec, b, curve[b] + d, N, M, seed) for b in betas for d in deltas]
        res = _pmap(_free_energy_cell, cells, workers)
        rows = []
        for (_, b, h, *_rest), (est, fa) in zip(cells, res):
            ok = est.mean <= fa + 3 * est.stderr
            rows.append((b, h, N, M, est.mean, est.stderr, est.drift, fa, int(ok)))
        out.csv("quenched_free_energy",
                ["beta", "h", "N", "M", "F_hat", "stderr", "drift", "F_a_N", "annealed_bound_ok"], rows)
    gs = sec.get("gap_scan")
    if gs:
        betas = grid(gs.get("beta_grid", [0.8]), "gap_scan.beta_grid")
        deltas = grid(gs.get("delta_grid", {"start": 1e-3, "stop": 0.1, "num": 5, "log": True}), "delta_grid")
        gammas = grid(gs.get("gamma_grid", [0.8, 0.9, 0.95]), "gamma_grid")
        M = _int(gs, "M", 500)
        k_cap, r_factor = _int(gs, "k_cap", 4096), _int(gs, "r_factor", 2)
        out.reset("rho_criterion", "jsonl")
        all_cells = []
        jobs = [(spec, b, deltas, gammas, M, seed, k_cap, r_factor) for b in betas]
        # one beta per task; results are flushed in beta order
        for bi, cells in enumerate(_pmap(_gap_cell, jobs, workers)):
            recs = []
            for c in cells:
                r = c.criterion
                recs.append({
                    "spec_hash": spec.content_hash, "seed": seed, "beta": c.beta, "h": c.h,
                    "delta": c.delta, "a": c.a, "gamma": r.gamma, "k": r.k, "r_max": r.r_max,
                    "rho": r.rho, "stderr": r.stderr, "rho_ucb": r.rho_ucb,
                    "tail_bound": r.tail_bound if math.isfinite(r.tail_bound) else "inf",
                    "verdict": r.verdict, "note": r.note,
                })
            out.append_jsonl("rho_criterion", recs)
            best = min(cells, key=lambda c: c.criterion.rho_ucb + c.criterion.tail_bound)
            est = best.estimate
            out.csv(f"khat_beta{bi}", ["n", "estimate", "stderr"],
                    [(n, est.K_hat[n], est.K_hat_se[n]) for n in range(est.K_hat.size)])
            out.csv(f"A_beta{bi}", ["n", "estimate", "stderr"],
                    [(n, est.A[n], est.A_se[n]) for n in range(est.A.size)])
            all_cells.extend(cells)
        summary = largest_certified(all_cells)
        out.csv("gap_scan_summary", ["beta", "certified_delta", "certified_a"],
                [(b, "" if d is None else d, "" if d is None else d / b**2) for b, d in summary.items()])
    return status


def cmd_sample(spec, cfg, out: Output, seed, workers):
    from .sampler import (
        contact_fraction, laplace_matrix, mean_with_se, sample_paths, sample_steps,
        stationary_mean_gap, transition_counts, write_path, write_stats,
    )
    from .spectral import normalized_kernel

    sec = section(cfg, "sample")
    beta = _float(sec, "beta", 0.5)
    N = _int(sec, "N", 10_000)
    n_paths = _int(sec, "n_paths", 100)
    ss = build_state_space(spec)
    sd = annealed_spectrum(spec, beta, ss)
    paths = sample_paths(spec, sd, beta, N, seed, n_paths, ss)
    if not all(p.check(spec.q) for p in paths):
        raise InvariantViolation("recorded states do not match regenerated states")
    for i in range(min(_int(sec, "dump", 1), n_paths)):
        write_path(paths[i], spec.q, out.path(f"path{i}", "txt"))

    cf, cf_se = mean_with_se([contact_fraction(p) for p in paths])
    rows = [("contact_fraction", cf, cf_se, n_paths)]
    if spec.alpha > 1:
        rows.append(("inverse_mean_gap", 1.0 / stationary_mean_gap(spec, sd, ss), 0.0, n_paths))

    steps = _int(sec, "transition_steps", 1000)
    tp = _int(sec, "transition_paths", 100)
    _, states = sample_steps(spec, sd, beta, steps, seed + 1, tp, ss)
    counts = transition_counts(states, ss)
    kern = normalized_kernel(spec, ss, beta, sd).weights
    tot = counts.sum(axis=1, keepdims=True)
    seen = tot[:, 0] > 0
    p_hat = counts[seen] / tot[seen]
    band = np.sqrt(kern[seen] * (1 - kern[seen]) / tot[seen])
    z = np.where(band > 0, np.abs(p_hat - kern[seen]) / np.where(band > 0, band, 1.0), 0.0)
    rows.append(("transition_max_z", float(z.max()), 0.0, tp))

    lap = sec.get("laplace")
    if lap:
        n, lam = _int(lap, "n", 64), _float(lap, "lambda", 1.0)
        lp = _int(lap, "n_paths", 10_000)
        exact = laplace_matrix(spec, sd, beta, lam / n, ss).transform(n)
        gaps, _ = sample_steps(spec, sd, beta, n, seed + 2, lp, ss)
        emp, emp_se = mean_with_se(np.exp(-lam * gaps.sum(axis=1) / n))
        rows.append(("laplace_exact", exact, 0.0, lp))
        rows.append(("laplace_empirical", emp, emp_se, lp))
    write_stats(rows, out.path("sample_stats", "csv"))
    return EXIT_OK


def cmd_validate(spec, cfg, out: Output, seed, workers):
    from .validate import run_checks

    checks = run_checks(spec, seed)
    out.csv("validate", ["check", "value", "tolerance", "passed"],
            [(c.name, c.value, c.tolerance, int(c.passed)) for c in checks])
    for c in checks:
        print(f"{'PASS' if c.passed else 'FAIL'} {c.name} value={c.value:.3e} tol={c.tolerance:.1e}")
    if not all(c.passed for c in checks):
        return EXIT_INVARIANT
    return EXIT_OK


COMMANDS = {
    "annealed-curve": cmd_annealed_curve,
    "relevance": cmd_relevance,
    "quenched": cmd_quenched,
    "sample": cmd_sample,
    "validate": cmd_validate,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="corrpin", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"corrpin {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("config", help="YAML config file")
        sp.add_argument("--out", help=f"output root (default ${ENV_OUT} or ./corrpin-out)")
        sp.add_argument("--seed", type=int, help="master seed override")
        sp.add_argument("--workers", type=int, default=1, help="worker processes")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
        spec = model_from_config(cfg, seed)
        root = args.out or cfg.get("out_dir") or os.environ.get(ENV_OUT) or "corrpin-out"
        out = Output(Path(root), args.command, spec)
        resolved = {k: v for k, v in cfg.items() if k != "out_dir"}
        resolved["seed"] = seed
        out.manifest(args.command, resolved, seed)
        code = COMMANDS[args.command](spec, cfg, out, seed, max(1, args.workers))
    except (ConfigError, ModelError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InvariantViolation as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (ConvergenceError, ReducibilityError, StateBudgetError, ArithmeticError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(out.dir)
    return code


if __name__ == "__main__":
    sys.exit(main())
