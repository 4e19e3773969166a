"""Command-line front end.

    nmsse <simulate|martingale-test|validate-noise|compare-gksl|convergence>
          --config CONFIG.json [--out DIR] [--seed N] [--workers N]

Exit codes: 0 success (or verdict equal to the configured expectation),
2 configuration or validation error, 3 verdict differs from expectation,
4 too many trajectories aborted on norm overflow.
"""

import argparse
import copy
import json
import os
import sys
import time

import numpy as np

from . import __version__
from . import rng as rngmod
from .config import build, config_hash, load_raw
from .ensemble import (WORKERS_ENV, AbortError, ConfigError, compare_to_reference,
                       convergence_study, martingale_branch_test, run_ensemble, validate_config)
from .noise import NoisePSDError, noise_statistics, validate_pair
from .oracles import GKSLSpec, gksl_solve

EXIT_OK, EXIT_CONFIG, EXIT_MISMATCH, EXIT_ABORT = 0, 2, 3, 4
COMMANDS = ("simulate", "martingale-test", "validate-noise", "compare-gksl", "convergence")


def fmt(v):
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    return "%.17g" % v


def write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(fmt(v) for v in row) + "\n")


def write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_plain(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return str(obj)
    return obj


def _outcome(verdict, expected):
    return EXIT_OK if verdict.lower() == expected else EXIT_MISMATCH


# each command returns (verdicts dict, exit code, list of written files)

def cmd_simulate(cfg, exp, out, workers):
    st = run_ensemble(cfg, workers)
    d = st.dim
    idx = [(i, j) for i in range(d) for j in range(d)]
    header = (["t", "mean_norm_sq", "se_norm_sq"] + [f"rho_re_{i}{j}" for i, j in idx]
              + [f"rho_im_{i}{j}" for i, j in idx] + ["raw_trace"])
    rows = []
    for k, t in enumerate(st.times):
        rows.append([t, st.mean_norm_sq[k], st.se_norm_sq[k]]
                    + [st.rho[k, i, j].real for i, j in idx]
                    + [st.rho[k, i, j].imag for i, j in idx] + [st.raw_trace[k]])
    write_csv(os.path.join(out, "ensemble_stats.csv"), header, rows)
    verdicts = {"n_used": st.n_used, "n_aborted": st.n_aborted}
    return verdicts, EXIT_OK, ["ensemble_stats.csv"]


def cmd_martingale(cfg, exp, out, workers):
    rep = martingale_branch_test(cfg, workers, with_oracle=bool(exp.get("with_oracle", True)))
    rows = []
    for p in range(len(rep.norm_s)):
        for c, t in enumerate(rep.checkpoints):
            orc = rep.oracle[p, c] if rep.oracle is not None else float("nan")
            rows.append([p, t, rep.norm_s[p], rep.cond_mean[p, c], rep.cond_se[p, c],
                         rep.z[p, c], rep.z_plain[p, c], orc])
    write_csv(os.path.join(out, "branching.csv"),
              ["prefix", "t", "norm_s", "cond_mean", "cond_se", "z", "z_plain", "oracle"], rows)
    files = ["branching.csv"]
    # pooled curves: Monte Carlo and oracle conditional means relative to |psi_s|^2
    mc = rep.cond_mean.sum(axis=0) / rep.norm_s.sum()
    summary = [mc]
    header = ["t", "mc_ratio"]
    if rep.oracle is not None:
        summary += [rep.oracle.sum(axis=0) / rep.norm_s.sum(), rep.oracle_z]
        header += ["oracle_ratio", "oracle_z"]
    write_csv(os.path.join(out, "branching_summary.csv"), header,
              np.column_stack([rep.checkpoints] + summary))
    files.append("branching_summary.csv")
    report = rep.to_json()
    report["expected_verdict"] = exp["expected_verdict"]
    write_json(os.path.join(out, "branching_report.json"), report)
    files.append("branching_report.json")
    verdicts = {"branching": rep.verdict, "expected_verdict": exp["expected_verdict"].upper()}
    if rep.oracle_z is not None:
        verdicts["oracle_agrees"] = rep.oracle_agrees()
    return verdicts, _outcome(rep.verdict, exp["expected_verdict"]), files


def _default_lags(grid, n=10):
    k = np.unique(np.linspace(0, grid.n_steps // 2, n).round().astype(int))
    return [float(grid.dt * i) for i in k]


def cmd_validate_noise(cfg, exp, out, workers):
    rep = validate_pair(cfg.pair)
    write_json(os.path.join(out, "noise_validation.json"), rep.to_json())
    files = ["noise_validation.json"]
    verdicts = {"accepted": rep.accepted, "kappa": rep.kappa, "residual": rep.residual}
    if not rep.accepted:
        print("noise pair rejected: " + "; ".join(rep.reasons), file=sys.stderr)
        return verdicts, EXIT_CONFIG, files
    n_real = int(exp.get("n_realizations", 0))
    if n_real <= 0:
        return verdicts, EXIT_OK, files
    lags = exp.get("lags") or _default_lags(cfg.grid)
    n_se = float(exp.get("n_se", 5.0))
    rngs = rngmod.streams(cfg.master_seed, "noise-statistics", range(n_real))
    ns = noise_statistics(cfg.pair, cfg.grid, rngs, lags)
    rows = np.column_stack([ns.lags, ns.alpha_pred, ns.alpha_est, ns.alpha_se,
                            ns.eta_pred, ns.eta_est, ns.eta_se])
    write_csv(os.path.join(out, "noise_statistics.csv"),
              ["lag", "alpha_pred", "alpha_est", "alpha_se", "eta_pred", "eta_est", "eta_se"], rows)
    files.append("noise_statistics.csv")
    verdict = "PASS" if ns.passed(n_se) else "FAIL"
    verdicts["statistics"] = verdict
    return verdicts, _outcome(verdict, exp["expected_verdict"]), files


def cmd_compare_gksl(cfg, exp, out, workers):
    st = run_ensemble(cfg, workers)
    rate = exp.get("gksl_rate")
    if rate is None:
        # white limit: a delta kernel w*delta in alpha gives the rate w
        rate = cfg.pair.white_x + cfg.pair.white_y
    spec = GKSLSpec(cfg.model.H, cfg.model.L, float(rate))
    psi0 = cfg.model.psi0
    ref = gksl_solve(spec, np.outer(psi0, psi0.conj()), st.times)
    n_se = float(exp.get("n_se", 3.0))
    cmp = compare_to_reference(st, ref, n_se=n_se)
    rows = np.column_stack([cmp.times, cmp.distance, cmp.se, n_se * cmp.se])
    write_csv(os.path.join(out, "gksl_comparison.csv"), ["t", "trace_distance", "se", "envelope"], rows)
    verdict = "PASS" if cmp.passed else "FAIL"
    verdicts = {"gksl": verdict, "gksl_rate": float(rate), "max_ratio": cmp.max_ratio,
                "expected_verdict": exp["expected_verdict"].upper()}
    return verdicts, _outcome(verdict, exp["expected_verdict"]), ["gksl_comparison.csv"]


def cmd_convergence(cfg, exp, out, workers):
    levels = exp.get("dt_levels")
    if not levels:
        raise ConfigError("convergence needs experiment.dt_levels")
    tab = convergence_study(cfg, [float(d) for d in levels], workers, reference=exp.get("reference"))
    write_csv(os.path.join(out, "convergence.csv"), ["dt", "mean", "se", "diff", "diff_se"],
              np.column_stack([tab.dts, tab.mean, tab.se, tab.diff, tab.diff_se]))
    verdicts = {"order": tab.order, "kind": tab.kind}
    bounds = exp.get("expected_order")
    if bounds is None:
        return verdicts, EXIT_OK, ["convergence.csv"]
    lo, hi = (float(b) for b in bounds)
    verdict = "PASS" if lo <= tab.order <= hi else "FAIL"
    verdicts["convergence"] = verdict
    return verdicts, _outcome(verdict, exp["expected_verdict"]), ["convergence.csv"]


HANDLERS = {
    "simulate": cmd_simulate,
    "martingale-test": cmd_martingale,
    "validate-noise": cmd_validate_noise,
    "compare-gksl": cmd_compare_gksl,
    "convergence": cmd_convergence,
}


def parser():
    p = argparse.ArgumentParser(prog="nmsse", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="experiment configuration (JSON)")
        s.add_argument("--out", default="results", help="output directory")
        s.add_argument("--seed", type=int, default=None, help="master seed, overrides the config")
        s.add_argument("--workers", type=int, default=None,
                       help=f"worker processes (default: ${WORKERS_ENV} or CPU count)")
    return p


def run(command, config_path, out, seed=None, workers=None):
    t0 = time.perf_counter()
    try:
        raw = load_raw(config_path)
        if seed is not None:
            raw = copy.deepcopy(raw)
            raw["ensemble"]["master_seed"] = seed
        cfg, exp = build(raw)
        kind = exp.get("kind")
        if kind is not None and kind != command:
            raise ConfigError(f"config is for experiment {kind!r}, not {command!r}")
        if command != "validate-noise":
            validate_config(cfg, need_branch=command == "martingale-test")
        if workers is not None and workers < 1:
            raise ConfigError("--workers must be positive")
        os.makedirs(out, exist_ok=True)
        verdicts, code, files = HANDLERS[command](cfg, exp, out, workers)
    except AbortError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except (ConfigError, NoisePSDError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    manifest = {
        "config_hash": config_hash(raw),
        "master_seed": cfg.master_seed,
        "version": __version__,
        "wall_time": time.perf_counter() - t0,
        "experiment": command,
        "verdicts": verdicts,
        "exit_code": code,
        "outputs": files,
    }
    write_json(os.path.join(out, "manifest.json"), manifest)
    print(json.dumps(_plain({"experiment": command, "verdicts": verdicts, "exit_code": code})))
    return code


def main(argv=None):
    args = parser().parse_args(argv)
    return run(args.command, args.config, args.out, args.seed, args.workers)


if __name__ == "__main__":
    sys.exit(main())
