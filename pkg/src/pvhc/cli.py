"""Command-line pipeline: simulate -> fit -> hc.

Exit codes
----------
0  success
1  unexpected internal error
2  configuration or input error (bad config, unreadable network, bad CLI usage)
3  simulation failure (too many non-converged load flows)
4  fitting failure (samples schema mismatch, GP or logit fit failure)
5  solving failure (malformed model bundle, HC query error)
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import io
import json
import logging
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from .control import ControlConfig, DroopBreakpoints, EssUnit
from .gpr import FitOptions, GprFitError, fit_gpr, model_from_dict, model_to_dict, predict
from .hc import HcQuery, compute_risk_curve, result_to_dict, run_query, write_risk_curve_csv
from .logit import (
    DegenerateLabelsError,
    LogitFitError,
    LogitModel,
    fit_logit,
    label_violations,
    logit_violation_prob,
)
from .netmodel import CaseSyntaxError, Network, NetworkError, load_network
from .powerflow import SolverSettings
from .probdist import BetaParams, CopulaSpec, NormalParams, make_rng
from .scenarios import (
    ScenarioConfig,
    SimulationError,
    generate_pv_scenarios,
    read_samples_csv,
    reduce_profiles,
    run_probabilistic_load_flow,
    sample_profiles,
    write_samples_csv,
)

log = logging.getLogger("pvhc")

EXIT_OK, EXIT_INTERNAL, EXIT_CONFIG, EXIT_SIMULATION, EXIT_FIT, EXIT_SOLVE = 0, 1, 2, 3, 4, 5

CONFIG_SCHEMA = "pvhc-config/1"
MODELS_SCHEMA = "pvhc-models/1"
REPORT_SCHEMA = "pvhc-hc-report/1"
MANIFEST_SCHEMA = "pvhc-manifest/1"

_STREAM_SPLIT = 3

DEFAULT_CONFIG: dict[str, Any] = {
    "schema": CONFIG_SCHEMA,
    "network": "case33",
    "pcc_voltage": 1.03,
    "seed": 2024,
    "n_jobs": 1,
    "output_dir": "pvhc-out",
    "v_limit": 1.05,
    "scenario": {
        "n_location_scenarios": 3000,
        "n_profiles": 4,
        "raw_copula_samples": 10000,
        "profile_tail_fraction": 0.01,
        "candidate_buses": None,
        "per_bus_cap_factor": 1.5,
        "demand": {"mean": 0.5, "sd": 0.025},
        "generation": {"alpha": 15.0, "beta": 6.0},
        "copula": {"rho": 0.15},
    },
    "control": {
        "mode": "none",
        "breakpoints": {"v1": 0.95, "v2": 0.97, "v3": 1.03, "v4": 1.05},
        "c1": 0.95,
        "ess_units": [],
        "epsilon_v": 0.005,
        "max_control_iters": 30,
        "damping": 0.5,
    },
    "solver": {"tolerance": 1e-8, "max_iterations": 50},
    "simulation": {"max_failure_fraction": 0.01},
    "fit": {"train_size": 500, "n_restarts": 8, "max_train": 2000},
    "hc": {
        "grid_points": 2001,
        "risk_curve_points": 101,
        "queries": [
            {"method": "gp_mean"},
            {"method": "gp_bounds", "alpha": 0.05},
            {"method": "gp_cc", "beta": 0.01},
            {"method": "gp_cc", "beta": 0.05},
            {"method": "gp_cc", "beta": 0.1},
            {"method": "gp_cc", "beta": 0.25},
            {"method": "logit_cc", "beta": 0.01},
            {"method": "logit_cc", "beta": 0.05},
            {"method": "logit_cc", "beta": 0.1},
            {"method": "logit_cc", "beta": 0.25},
        ],
    },
}

# Keys whose values are free-form (not checked against the defaults).
_OPAQUE = {("scenario", "candidate_buses"), ("control", "ess_units"), ("hc", "queries")}
# Keys that do not affect results and are left out of the config hash.
_UNHASHED = ("output_dir", "n_jobs")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# --------------------------------------------------------------------------
# Configuration
# --------------------------------------------------------------------------

def _merge(base: dict, over: dict, path: tuple = ()) -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        here = path + (key,)
        if key not in base:
            raise CliError(EXIT_CONFIG, f"unknown config key {'.'.join(here)!r}")
        if isinstance(base[key], dict) and here not in _OPAQUE:
            if not isinstance(val, dict):
                raise CliError(EXIT_CONFIG, f"config key {'.'.join(here)!r} must be an object")
            out[key] = _merge(base[key], val, here)
        else:
            out[key] = copy.deepcopy(val)
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, assignment: str) -> dict:
    """Apply one ``dotted.key=value`` override; the value is parsed as JSON if possible."""
    key, sep, raw = assignment.partition("=")
    if not sep or not key:
        raise CliError(EXIT_CONFIG, f"--set expects key=value, got {assignment!r}")
    parts = key.split(".")
    nested: Any = _parse_value(raw)
    for p in reversed(parts):
        nested = {p: nested}
    return _merge(cfg, nested)


def resolve_config(path: str | None, overrides=(), seed: int | None = None, out: str | None = None):
    """Defaults, then the config file, then ``--set`` overrides, then ``--seed``/``--out``."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    base_dir = Path.cwd()
    if path is not None:
        p = Path(path)
        try:
            user = json.loads(p.read_text())
        except FileNotFoundError:
            raise CliError(EXIT_CONFIG, f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise CliError(EXIT_CONFIG, f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(user, dict):
            raise CliError(EXIT_CONFIG, "config document must be a JSON object")
        if user.get("schema", CONFIG_SCHEMA) != CONFIG_SCHEMA:
            raise CliError(EXIT_CONFIG, f"unsupported config schema {user.get('schema')!r}")
        cfg = _merge(cfg, user)
        base_dir = p.resolve().parent
    for a in overrides:
        cfg = apply_override(cfg, a)
    if seed is not None:
        cfg["seed"] = seed
    if out is not None:
        cfg["output_dir"] = out
    seed_v = cfg["seed"]
    if not (isinstance(seed_v, int) and not isinstance(seed_v, bool) and 0 <= seed_v < 2**64):
        raise CliError(EXIT_CONFIG, f"seed must be an unsigned 64-bit integer, got {seed_v!r}")
    net = cfg["network"]
    if isinstance(net, str) and net not in ("case33", "case123") and not Path(net).is_absolute():
        cfg["network"] = str(base_dir / net)
    return cfg


def config_hash(cfg: dict) -> str:
    hashed = {k: v for k, v in cfg.items() if k not in _UNHASHED}
    blob = json.dumps(hashed, sort_keys=True, separators=(",", ":"), allow_nan=False)
    return hashlib.sha256(blob.encode()).hexdigest()


@dataclass(frozen=True)
class PipelineConfig:
    network: Network
    network_name: str
    scenario: ScenarioConfig
    control: ControlConfig
    solver: SolverSettings
    train_size: int
    fit: FitOptions
    v_limit: float
    hc_queries: tuple[HcQuery, ...]
    risk_curve_points: int
    max_failure_fraction: float
    output_dir: Path
    seed: int
    n_jobs: int
    raw: dict


def build_pipeline_config(cfg: dict) -> PipelineConfig:
    """Turn a resolved config document into typed settings, validating as it goes."""
    try:
        net = load_network(cfg["network"], pcc_voltage=float(cfg["pcc_voltage"]))
    except (NetworkError, CaseSyntaxError, FileNotFoundError, ValueError) as exc:
        raise CliError(EXIT_CONFIG, f"cannot load network {cfg['network']!r}: {exc}") from None
    try:
        s = cfg["scenario"]
        scen = ScenarioConfig(
            n_location_scenarios=int(s["n_location_scenarios"]),
            n_profiles=int(s["n_profiles"]),
            raw_copula_samples=int(s["raw_copula_samples"]),
            candidate_buses=s["candidate_buses"],
            per_bus_cap_factor=float(s["per_bus_cap_factor"]),
            demand=NormalParams(float(s["demand"]["mean"]), float(s["demand"]["sd"])),
            generation=BetaParams(float(s["generation"]["alpha"]), float(s["generation"]["beta"])),
            copula=CopulaSpec(float(s["copula"]["rho"])),
            profile_tail_fraction=float(s["profile_tail_fraction"]),
            seed=cfg["seed"],
        )
        c = cfg["control"]
        units = []
        for u in c["ess_units"]:
            if int(u["bus"]) not in net.index_of:
                raise ValueError(f"ESS unit at unknown bus {u['bus']}")
            units.append(EssUnit(int(u["bus"]), float(u["p_max_kw"])))
        ctrl = ControlConfig(
            mode=c["mode"],
            breakpoints=DroopBreakpoints(**{k: float(v) for k, v in c["breakpoints"].items()}),
            c1=float(c["c1"]),
            ess_units=tuple(units),
            epsilon_v=float(c["epsilon_v"]),
            max_control_iters=int(c["max_control_iters"]),
            damping=float(c["damping"]),
        )
        solver = SolverSettings(float(cfg["solver"]["tolerance"]), int(cfg["solver"]["max_iterations"]))
        f = cfg["fit"]
        fit = FitOptions(n_restarts=int(f["n_restarts"]), seed=cfg["seed"], max_train=int(f["max_train"]))
        v_limit = float(cfg["v_limit"])
        h = cfg["hc"]
        queries = tuple(
            HcQuery(
                method=q["method"],
                beta=q.get("beta"),
                alpha=q.get("alpha"),
                v_limit=v_limit,
                grid_points=int(h["grid_points"]),
            )
            for q in h["queries"]
        )
        train_size = int(f["train_size"])
        if not 10 <= train_size <= fit.max_train:
            raise ValueError(f"train_size must lie in [10, {fit.max_train}]")
        return PipelineConfig(
            network=net,
            network_name=str(cfg["network"]) if cfg["network"] in ("case33", "case123") else Path(cfg["network"]).name,
            scenario=scen,
            control=ctrl,
            solver=solver,
            train_size=train_size,
            fit=fit,
            v_limit=v_limit,
            hc_queries=queries,
            risk_curve_points=int(h["risk_curve_points"]),
            max_failure_fraction=float(cfg["simulation"]["max_failure_fraction"]),
            output_dir=Path(cfg["output_dir"]),
            seed=cfg["seed"],
            n_jobs=int(cfg["n_jobs"]),
            raw=cfg,
        )
    except CliError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise CliError(EXIT_CONFIG, f"invalid configuration: {exc}") from None


# --------------------------------------------------------------------------
# Output helpers
# --------------------------------------------------------------------------

def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, allow_nan=False) + "\n"


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="\n") as fh:
        fh.write(text)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _finite_or_none(v):
    return None if v is None or not np.isfinite(v) else float(v)


# --------------------------------------------------------------------------
# Stages
# --------------------------------------------------------------------------

def simulate_stage(pc: PipelineConfig):
    raw = sample_profiles(pc.scenario)
    profiles = reduce_profiles(raw, pc.scenario.n_profiles, pc.seed, pc.scenario.profile_tail_fraction)
    try:
        scenarios = generate_pv_scenarios(pc.network, pc.scenario)
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, f"scenario generation: {exc}") from None
    try:
        records = run_probabilistic_load_flow(
            pc.network, scenarios, profiles, pc.control, pc.solver,
            n_jobs=pc.n_jobs, max_failure_fraction=pc.max_failure_fraction,
        )
    except SimulationError as exc:
        raise CliError(EXIT_SIMULATION, str(exc)) from None
    stats = {
        "records": len(records),
        "converged": sum(r.converged for r in records),
        "excluded_nonconverged": sum(not r.converged for r in records),
        "resampled_pv_draws": sum(s.attempts - 1 for s in scenarios),
        "profiles": [{"p_dn": p.p_dn, "p_gn": p.p_gn} for p in profiles],
    }
    return records, stats


def fit_stage(pc: PipelineConfig, records) -> dict:
    usable = [r for r in records if r.converged]
    if pc.train_size >= len(usable):
        raise CliError(EXIT_FIT, f"train_size {pc.train_size} leaves no held-out samples ({len(usable)} usable)")
    perm = make_rng(pc.seed, _STREAM_SPLIT).permutation(len(usable))
    train = [usable[i] for i in perm[: pc.train_size]]
    test = [usable[i] for i in perm[pc.train_size:]]
    try:
        gp = fit_gpr(train, pc.fit)
    except GprFitError as exc:
        raise CliError(EXIT_FIT, f"GP fit failed: {exc}") from None
    lr, logit_note = None, None
    try:
        lr = fit_logit(label_violations(train, pc.v_limit))
    except DegenerateLabelsError as exc:
        logit_note = str(exc)
        log.warning("logit model skipped: %s", exc)
    except LogitFitError as exc:
        raise CliError(EXIT_FIT, f"logit fit failed: {exc}") from None

    xt = np.array([r.x for r in test])
    vt = np.array([r.v_max for r in test])
    mu = predict(gp, xt).mu
    err = mu - vt
    ss_tot = float(np.sum((vt - vt.mean()) ** 2))
    label = vt > pc.v_limit
    gp_cls = mu > pc.v_limit
    metrics = {
        "test_size": len(test),
        "violation_rate": float(label.mean()),
        "gpr": {
            "mae": float(np.mean(np.abs(err))),
            "rmse": float(np.sqrt(np.mean(err**2))),
            "r2": 1.0 - float(np.sum(err**2)) / ss_tot if ss_tot > 0 else None,
            "accuracy": float(np.mean(gp_cls == label)),
        },
        "logit": None,
        "agreement": None,
    }
    if lr is not None:
        lr_cls = logit_violation_prob(lr, xt) > 0.5
        metrics["logit"] = {"accuracy": float(np.mean(lr_cls == label))}
        metrics["agreement"] = float(np.mean(lr_cls == gp_cls))
    return {
        "schema": MODELS_SCHEMA,
        "network": pc.network_name,
        "peak_load_mw": pc.network.peak_load_mw,
        "control_mode": pc.control.mode,
        "v_limit": pc.v_limit,
        "split": {"seed": pc.seed, "train_size": len(train), "test_size": len(test)},
        "gpr": model_to_dict(gp),
        "logit": None if lr is None else {"b0": lr.b0, "b1": lr.b1},
        "logit_note": logit_note,
        "metrics": metrics,
    }


def _load_bundle(bundle: dict):
    try:
        if bundle.get("schema") != MODELS_SCHEMA:
            raise ValueError(f"unexpected schema {bundle.get('schema')!r}")
        gp = model_from_dict(bundle["gpr"])
        lr = None if bundle.get("logit") is None else LogitModel(float(bundle["logit"]["b0"]), float(bundle["logit"]["b1"]))
        peak = float(bundle["peak_load_mw"])
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        raise CliError(EXIT_SOLVE, f"malformed model bundle: {exc}") from None
    return gp, lr, peak


def hc_stage(pc: PipelineConfig, bundle: dict):
    gp, lr, peak = _load_bundle(bundle)
    rows = []
    for q in pc.hc_queries:
        if q.method == "logit_cc" and lr is None:
            rows.append({
                "method": q.method,
                "parameters": {"v_limit": q.v_limit, "beta": q.beta},
                "hc": None,
                "hc_mw": None,
                "diagnostics": ["no logit model: training labels were degenerate"],
            })
            continue
        try:
            rows.extend(result_to_dict(r) for r in run_query(q, gp, lr, peak))
        except (ValueError, FloatingPointError) as exc:
            raise CliError(EXIT_SOLVE, f"HC query {q.method} failed: {exc}") from None
    report = {
        "schema": REPORT_SCHEMA,
        "network": bundle.get("network"),
        "control_mode": bundle.get("control_mode"),
        "peak_load_mw": peak,
        "results": rows,
    }
    curve = compute_risk_curve(gp, lr, pc.risk_curve_points, pc.v_limit)
    return report, curve


def _manifest(pc: PipelineConfig, sim_stats: dict | None, files: dict[str, Path]) -> dict:
    m = {
        "schema": MANIFEST_SCHEMA,
        "seed": pc.seed,
        "config_sha256": config_hash(pc.raw),
        "config": {k: v for k, v in pc.raw.items() if k not in _UNHASHED},
        "network": {
            "name": pc.network_name,
            "buses": pc.network.n_bus,
            "branches": len(pc.network.branches),
            "peak_load_mw": pc.network.peak_load_mw,
        },
    }
    if sim_stats is not None:
        m["simulation"] = sim_stats
    m["files"] = {name: _sha256(p) for name, p in sorted(files.items())}
    return m


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------

def _samples_text(records) -> str:
    buf = io.StringIO()
    write_samples_csv(records, buf)
    return buf.getvalue()


def _curve_text(curve) -> str:
    buf = io.StringIO()
    write_risk_curve_csv(curve, buf)
    return buf.getvalue()


def cmd_simulate(pc: PipelineConfig, args) -> int:
    out = pc.output_dir
    t0 = time.perf_counter()
    records, stats = simulate_stage(pc)
    log.info("simulate: %d load flows in %.2f s", len(records), time.perf_counter() - t0)
    samples = out / "samples.csv"
    _write(samples, _samples_text(records))
    _write(out / "manifest.json", _dump_json(_manifest(pc, stats, {"samples.csv": samples})))
    return EXIT_OK


def _read_samples(path: Path):
    try:
        with open(path, newline="") as fh:
            return read_samples_csv(fh)
    except FileNotFoundError:
        raise CliError(EXIT_CONFIG, f"samples file not found: {path}") from None
    except ValueError as exc:
        raise CliError(EXIT_FIT, f"samples CSV {path}: {exc}") from None


def _read_bundle(path: Path) -> dict:
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise CliError(EXIT_CONFIG, f"model bundle not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_SOLVE, f"malformed model bundle {path}: {exc}") from None


def cmd_fit(pc: PipelineConfig, args) -> int:
    samples = Path(args.samples) if args.samples else pc.output_dir / "samples.csv"
    records = _read_samples(samples)
    t0 = time.perf_counter()
    bundle = fit_stage(pc, records)
    log.info("fit: %.2f s", time.perf_counter() - t0)
    _write(pc.output_dir / "models.json", _dump_json(bundle))
    return EXIT_OK


def cmd_hc(pc: PipelineConfig, args) -> int:
    bundle = _read_bundle(Path(args.models) if args.models else pc.output_dir / "models.json")
    report, curve = hc_stage(pc, bundle)
    _write(pc.output_dir / "hc_report.json", _dump_json(report))
    _write(pc.output_dir / "risk_curve.csv", _curve_text(curve))
    return EXIT_OK


def cmd_risk_curve(pc: PipelineConfig, args) -> int:
    bundle = _read_bundle(Path(args.models) if args.models else pc.output_dir / "models.json")
    gp, lr, _ = _load_bundle(bundle)
    points = args.points if args.points is not None else pc.risk_curve_points
    curve = compute_risk_curve(gp, lr, points, pc.v_limit)
    _write(pc.output_dir / "risk_curve.csv", _curve_text(curve))
    return EXIT_OK


def cmd_pipeline(pc: PipelineConfig, args) -> int:
    out = pc.output_dir
    t0 = time.perf_counter()
    records, stats = simulate_stage(pc)
    t1 = time.perf_counter()
    log.info("simulate: %d load flows in %.2f s", len(records), t1 - t0)
    bundle = fit_stage(pc, records)
    report, curve = hc_stage(pc, bundle)
    log.info("fit + hc: %.2f s", time.perf_counter() - t1)
    files = {
        "samples.csv": (out / "samples.csv", _samples_text(records)),
        "models.json": (out / "models.json", _dump_json(bundle)),
        "hc_report.json": (out / "hc_report.json", _dump_json(report)),
        "risk_curve.csv": (out / "risk_curve.csv", _curve_text(curve)),
    }
    for path, text in files.values():
        _write(path, text)
    manifest = _manifest(pc, stats, {k: v[0] for k, v in files.items()})
    _write(out / "manifest.json", _dump_json(manifest))
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "hc": cmd_hc,
    "pipeline": cmd_pipeline,
    "risk-curve": cmd_risk_curve,
}


def _u64(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must lie in [0, 2**64)")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (defaults are used for missing keys)")
    common.add_argument("--seed", type=_u64, help="override the config seed")
    common.add_argument("--out", help="output directory (overrides output_dir)")
    common.add_argument(
        "--set", action="append", default=[], metavar="KEY=VALUE",
        help="override one config key by dotted path, e.g. control.mode=volt_var (repeatable)",
    )
    common.add_argument("-q", "--quiet", action="store_true", help="only log warnings and errors")

    parser = argparse.ArgumentParser(
        prog="pvhc",
        description="Chance-constrained PV hosting capacity by probabilistic load flow and GP/logit learning.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="generate samples.csv by probabilistic load flow")
    p = sub.add_parser("fit", parents=[common], help="fit GP and logit models to a samples CSV")
    p.add_argument("--samples", help="samples CSV (default: <out>/samples.csv)")
    p = sub.add_parser("hc", parents=[common], help="solve the configured HC queries")
    p.add_argument("--models", help="model bundle (default: <out>/models.json)")
    sub.add_parser("pipeline", parents=[common], help="simulate, fit and solve in one run")
    p = sub.add_parser("risk-curve", parents=[common], help="write the GP/logit risk curve only")
    p.add_argument("--models", help="model bundle (default: <out>/models.json)")
    p.add_argument("--points", type=int, help="number of grid points over [0, 1]")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = resolve_config(args.config, args.set, args.seed, args.out)
        pc = build_pipeline_config(cfg)
        return COMMANDS[args.command](pc, args)
    except CliError as exc:
        log.error("%s", exc)
        return exc.code
    except Exception:  # pragma: no cover - last-resort guard
        log.exception("unexpected error")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
