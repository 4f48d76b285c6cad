"""Command-line front end: ``wncs {channel,analyze,synthesize,simulate,reproduce}``.

Exit codes: 0 success, 1 negative verdict under ``--require-stable``,
2 usage or configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import warnings
from pathlib import Path

import jsonschema
import numpy as np

from . import channel as chn
from .config import ConfigError, ExperimentConfig, fixture_names, load_config
from .control import (care_solve, classical_care_solve,
                      critical_probability_bound, mare_solve, mode_independent_solution)
from .errors import (ConstructionError, ConsistencyError, DimensionError, DomainError,
                     NoSolutionError, NumericalError)
from .mjls import (GainSet, MjlsModel, build_certificate, build_lambda, build_psi,
                   classical_stabilizability_radius, is_ms_stable, spectral_radius,
                   verify_certificate)
from .sim import SimConfig, ensemble_to_csv, ensemble_to_gnuplot, simulate, summary

EXIT_OK, EXIT_VERDICT, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3
SYNTHESIS_METHODS = ("markov", "bernoulli", "mode-independent", "classical")
ENSEMBLE_DIVERGENCE_NORM = 1e6


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.10g}"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, np.ndarray):
        return json.dumps(_jsonable(v))
    if isinstance(v, (list, tuple)):
        return json.dumps(_jsonable(v))
    return str(v)


def _jsonable(v):
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        f = float(v)
        return float(f"{f:.10g}") if np.isfinite(f) else str(f)
    return v


def render(report: dict, as_json: bool) -> str:
    if as_json:
        return json.dumps(_jsonable(report), indent=2, sort_keys=False) + "\n"
    lines = []
    for k, v in report.items():
        if isinstance(v, list) and v and all(isinstance(x, str) for x in v):
            lines += [f"{k} = {x}\n" for x in v]
        else:
            lines.append(f"{k} = {_fmt(v)}\n")
    return "".join(lines)


def _verdict(stable: bool) -> str:
    return "STABLE" if stable else "UNSTABLE"


def channel_report(cfg: ExperimentConfig) -> tuple[dict, chn.MarkovChannel]:
    a = cfg.analytic
    mean, var = chn.expected_per(a)
    th = cfg.threshold_db()
    mc = cfg.markov_channel()
    rep = {
        "fixture": cfg.name,
        "mu_db": a.mu_db,
        "sigma_db": a.sigma_db,
        "frame_bits": a.frame_bits,
        "mean_per": mean,
        "per_variance": var,
        "epsilon": cfg.epsilon,
        "threshold_db": th,
        "per_threshold_db": chn.per_threshold_for(cfg.epsilon, a.frame_bits),
        "burst_length": chn.burst_length(a, cfg.epsilon, th),
        "abstraction": cfg.channel_cfg.get("abstraction", "gilbert"),
        "n_states": mc.n_states,
        "tpm": mc.tpm,
        "delivery_prob": mc.delivery_prob,
        "stationary": mc.stationary,
        "channel_mean_per": 1.0 - mc.mean_delivery,
    }
    return rep, mc


def synthesize(cfg: ExperimentConfig, model: MjlsModel, method: str):
    """Return ``(report, gains)`` for one synthesis method."""
    if method == "bernoulli":
        nu = 1.0 - chn.expected_per(cfg.analytic)[0]
        sol = mare_solve(cfg.plant, cfg.weights, nu)
        on_channel = spectral_radius(build_lambda(model, GainSet.replicate(sol.gains[0], model.n_modes)))
        rep = {"method": method, "nu_hat": nu, "rho": sol.rho, "rho_on_channel": on_channel}
        gains = sol.gains
    elif method == "markov":
        sol = care_solve(model, cfg.weights)
        rep = {"method": method, "rho": sol.rho}
        gains = sol.gains
    elif method == "mode-independent":
        sol = mode_independent_solution(model, cfg.weights, strict=False)
        rep = {"method": method, "nu_hat": sol.extra["nu_hat"], "rho": sol.rho}
        gains = sol.gains
    elif method == "classical":
        sol = classical_care_solve(model, cfg.weights)
        rep = {"method": method, "rho": sol.rho, "rho_delayed": sol.extra["delayed_rho"]}
        gains = sol.gains
    else:
        raise DomainError(f"unknown synthesis method {method!r}")
    rep.update({
        "stabilizing": sol.stabilizing,
        "cost": sol.cost,
        "iterations": sol.iterations,
        "residual": sol.residual,
        "converged": sol.converged,
        "gains": gains.gains,
        "x_blocks": sol.x_blocks,
    })
    return rep, gains


def analyze_gains(model: MjlsModel, gains: GainSet) -> dict:
    if gains.n_modes == 1 and model.n_modes > 1:
        gains = GainSet.replicate(gains[0], model.n_modes)
    stable, rho = is_ms_stable(model, gains)
    rep = {
        "rho_lambda": rho,
        "rho_psi": spectral_radius(build_psi(model, gains)),
        "classical_radius": classical_stabilizability_radius(model, gains),
        "verdict": _verdict(stable),
    }
    if stable:
        try:
            feasible, margin = verify_certificate(model, build_certificate(model, gains))
            rep["certificate_feasible"] = feasible
            rep["certificate_margin"] = margin
        except (NumericalError, ConstructionError) as exc:
            rep["certificate_feasible"] = False
            rep["certificate_error"] = str(exc)
    else:
        rep["certificate_feasible"] = False
    return rep


def ensemble_verdict(ens) -> str:
    """UNSTABLE when the median terminal norm exceeds ``1e6`` or most runs diverged."""
    med = float(np.median(ens.terminal_norms))
    bad = med > ENSEMBLE_DIVERGENCE_NORM or ens.n_diverged > ens.n_runs // 2
    return _verdict(not bad)


def _check(ref: dict, key: str, value) -> str | None:
    entry = ref.get(key)
    if entry is None:
        return None
    if "expect" in entry:
        ok = str(value).lower() == entry["expect"]
        return f"{'PASS' if ok else 'FAIL'} {key}: {str(value).lower()} (expected {entry['expect']})"
    if value is None or not np.isfinite(value):
        return f"FAIL {key}: {value} (expected {entry['value']:.10g})"
    target = entry["value"]
    tol = entry.get("abs_tol", 0.0)
    if "rel_tol" in entry:
        tol = max(tol, entry["rel_tol"] * abs(target))
    ok = abs(value - target) <= tol + 1e-12 * abs(target)
    return f"{'PASS' if ok else 'FAIL'} {key}: {value:.10g} (expected {target:.10g} +/- {tol:.3g})"


def reproduce(cfg: ExperimentConfig, n_runs: int | None = None, horizon: int | None = None,
              seed: int | None = None, out: Path | None = None) -> dict:
    """Channel abstraction, both syntheses, stability analysis and paired Monte Carlo runs."""
    rep, mc = channel_report(cfg)
    model = MjlsModel(cfg.plant, mc)
    w = cfg.weights
    rep["critical_probability_bound"] = critical_probability_bound(cfg.plant.a)

    nu = 1.0 - rep["mean_per"]
    bern_gain = None
    try:
        b = mare_solve(cfg.plant, w, nu)
        bern_gain = b.gains[0]
        rep["bernoulli_rho"] = b.rho
        rep["bernoulli_cost"] = b.cost
        rep["bernoulli_stabilizing"] = b.stabilizing
        _, rho_ch = is_ms_stable(model, GainSet.replicate(bern_gain, model.n_modes))
        rep["bernoulli_rho_on_channel"] = rho_ch
        rep["bernoulli_verdict"] = _verdict(rho_ch < 1.0)
    except NoSolutionError:
        rep["bernoulli_rho"] = float("inf")
        rep["bernoulli_cost"] = float("inf")
        rep["bernoulli_stabilizing"] = False
        rep["bernoulli_verdict"] = _verdict(False)

    markov_gains = None
    try:
        c = care_solve(model, w)
        markov_gains = c.gains
        rep["markov_cost"] = c.cost
        rep["markov_source"] = "care"
    except NoSolutionError:
        rep["markov_cost"] = float("inf")
        rep["markov_source"] = "classical"
    cl = classical_care_solve(model, w)
    rep["classical_rho"] = cl.rho
    rep["classical_verdict"] = _verdict(cl.rho < 1.0)
    if markov_gains is None:
        # CARE diverged: apply the instantaneous-mode gains with the real delay
        markov_gains = cl.gains
    stable, rho = is_ms_stable(model, markov_gains)
    rep["markov_rho"] = rho
    rep["markov_verdict"] = _verdict(stable)
    rep["markov_classical_radius"] = classical_stabilizability_radius(model, markov_gains)

    sim_cfg = SimConfig(
        horizon=horizon or cfg.sim.horizon, n_runs=n_runs or cfg.sim.n_runs,
        initial_state=cfg.sim.initial_state, initial_mode=cfg.sim.initial_mode,
        seed=cfg.sim.seed if seed is None else seed, noise_on=cfg.sim.noise_on)
    rep["runs"] = sim_cfg.n_runs
    rep["horizon"] = sim_cfg.horizon
    rep["seed"] = sim_cfg.seed
    for label, policy in (("markov", markov_gains), ("bernoulli", bern_gain)):
        if policy is None:
            rep[f"{label}_ensemble"] = "SKIPPED"
            continue
        ens = simulate(model, policy, sim_cfg, w)
        s = summary(ens)
        rep[f"{label}_ensemble"] = ensemble_verdict(ens)
        rep[f"{label}_median_terminal_norm"] = s["median_terminal_norm"]
        rep[f"{label}_diverged_runs"] = s["diverged_runs"]
        rep[f"{label}_empirical_cost"] = s["empirical_cost"]
        rep[f"{label}_empirical_per"] = s["empirical_per"]
        rep[f"{label}_max_burst"] = s["max_burst"]
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            (out / f"{cfg.name}_{label}.csv").write_text(ensemble_to_csv(ens))
    if np.isfinite(rep["markov_cost"]) and "markov_empirical_cost" in rep:
        rep["empirical_cost_vs_markov_cost"] = rep["markov_empirical_cost"] / rep["markov_cost"]

    checks = [line for key in cfg.reference
              if (line := _check(cfg.reference, key, rep.get(key))) is not None]
    rep["check"] = checks
    rep["checks_passed"] = sum(line.startswith("PASS") for line in checks)
    rep["checks_total"] = len(checks)
    if out is not None:
        (out / f"{cfg.name}_summary.txt").write_text(render(rep, False))
    return rep


def _as_config(config) -> ExperimentConfig:
    return config if isinstance(config, ExperimentConfig) else load_config(config)


def cmd_channel(config) -> dict:
    """Channel report for a config object, YAML path or fixture name."""
    return channel_report(_as_config(config))[0]


def cmd_analyze(config, gains_source="markov") -> dict:
    """Stability report for a :class:`GainSet`, a gains file path or a synthesis method name."""
    cfg = _as_config(config)
    model = cfg.model()
    if isinstance(gains_source, GainSet):
        gains, label = gains_source, "given"
    elif str(gains_source) in SYNTHESIS_METHODS:
        gains, label = synthesize(cfg, model, str(gains_source))[1], str(gains_source)
    else:
        path = Path(gains_source)
        if not path.is_file():
            raise ConfigError(f"gains file {path} not found")
        gains, label = GainSet.from_text(path.read_text()), str(path)
    return {"fixture": cfg.name, "gains_source": label, **analyze_gains(model, gains)}


def cmd_reproduce(name, n_runs: int | None = None, horizon: int | None = None,
                  seed: int | None = None, out=None) -> dict:
    """Full pipeline for one fixture; writes CSV and summary files when ``out`` is given."""
    return reproduce(_as_config(name), n_runs, horizon, seed, Path(out) if out is not None else None)


def _config_from_args(args) -> ExperimentConfig:
    src = args.config or args.fixture
    if src is None:
        raise ConfigError("give a fixture name or --config PATH "
                          f"(fixtures: {', '.join(sorted(fixture_names()))})")
    return load_config(src)


def _common(p: argparse.ArgumentParser, fixture=True):
    if fixture:
        p.add_argument("fixture", nargs="?", help="fixture name or alias (e.g. near, whart-14m)")
    p.add_argument("--config", help="YAML experiment config (overrides the fixture)")
    p.add_argument("--seed", type=int, help="override the simulation seed")
    p.add_argument("--out", help="directory for CSV and text outputs")
    p.add_argument("--json", action="store_true", help="structured JSON report instead of key = value")
    p.add_argument("--require-stable", action="store_true",
                   help="exit with code 1 when the verdict is UNSTABLE")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="wncs", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("channel", help="channel analytics and Markov abstraction")
    _common(p)

    p = sub.add_parser("analyze", help="mean-square stability of a gain set")
    _common(p)
    p.add_argument("--gains", default="markov",
                   choices=SYNTHESIS_METHODS,
                   help="synthesize the gains to analyze with this method")
    p.add_argument("--gains-file", help="gain set in plain-text format (overrides --gains)")

    p = sub.add_parser("synthesize", help="LQ synthesis")
    _common(p)
    p.add_argument("--method", default="markov",
                   choices=SYNTHESIS_METHODS)

    p = sub.add_parser("simulate", help="Monte Carlo ensemble")
    _common(p)
    p.add_argument("--policy", default="markov", choices=["markov", "bernoulli", "mode-independent"])
    p.add_argument("--runs", type=int)
    p.add_argument("--horizon", type=int)
    p.add_argument("--gnuplot", action="store_true", help="also write gnuplot data blocks")

    p = sub.add_parser("reproduce", help="full pipeline for one fixture with reference checks")
    _common(p)
    p.add_argument("--runs", type=int)
    p.add_argument("--horizon", type=int)
    return ap


def _run(args) -> tuple[dict, int]:
    cfg = _config_from_args(args)
    out = Path(args.out) if args.out else None
    if args.command == "channel":
        rep, mc = channel_report(cfg)
        if out:
            out.mkdir(parents=True, exist_ok=True)
            (out / f"{cfg.name}_channel.txt").write_text(mc.to_text())
        return rep, EXIT_OK
    model = cfg.model()
    if args.command == "analyze":
        rep = cmd_analyze(cfg, args.gains_file or args.gains)
        return rep, EXIT_VERDICT if args.require_stable and rep["verdict"] != "STABLE" else EXIT_OK
    if args.command == "synthesize":
        rep, gains = synthesize(cfg, model, args.method)
        rep = {"fixture": cfg.name, **rep}
        if out:
            out.mkdir(parents=True, exist_ok=True)
            (out / f"{cfg.name}_{args.method}_gains.txt").write_text(gains.to_text())
        bad = args.require_stable and not rep["stabilizing"]
        return rep, EXIT_VERDICT if bad else EXIT_OK
    if args.command == "simulate":
        method = {"markov": "markov", "bernoulli": "bernoulli",
                  "mode-independent": "mode-independent"}[args.policy]
        _, gains = synthesize(cfg, model, method)
        policy = gains[0] if method == "bernoulli" else gains
        sc = SimConfig(horizon=args.horizon or cfg.sim.horizon, n_runs=args.runs or cfg.sim.n_runs,
                       initial_state=cfg.sim.initial_state, initial_mode=cfg.sim.initial_mode,
                       seed=cfg.sim.seed if args.seed is None else args.seed,
                       noise_on=cfg.sim.noise_on)
        ens = simulate(model, policy, sc, cfg.weights)
        rep = {"fixture": cfg.name, "policy": args.policy, "seed": sc.seed, **summary(ens),
               "verdict": ensemble_verdict(ens)}
        if out:
            out.mkdir(parents=True, exist_ok=True)
            (out / f"{cfg.name}_{args.policy}.csv").write_text(ensemble_to_csv(ens))
            if args.gnuplot:
                (out / f"{cfg.name}_{args.policy}.dat").write_text(ensemble_to_gnuplot(ens))
        bad = args.require_stable and rep["verdict"] != "STABLE"
        return rep, EXIT_VERDICT if bad else EXIT_OK
    rep = reproduce(cfg, args.runs, args.horizon, args.seed, out)
    bad = args.require_stable and rep["markov_verdict"] != "STABLE"
    return rep, EXIT_VERDICT if bad else EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            rep, code = _run(args)
    except (ConfigError, DomainError, DimensionError, ConstructionError,
            jsonschema.ValidationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, ConsistencyError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    sys.stdout.write(render(rep, args.json))
    return code


if __name__ == "__main__":
    sys.exit(main())
