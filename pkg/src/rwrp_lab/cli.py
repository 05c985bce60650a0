"""``rwrp-lab``: run experiments from TOML configs and write reproducible reports.

Exit codes: 0 success, 2 config/schema error, 3 compute budget exceeded,
4 certification failure (a result disagreed with its oracle), 1 anything else.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import platform
import sys
import time
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

import numpy as np
import scipy

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__, report
from .env import (Bernoulli, LogGamma, Model, PeriodicModel, TruncatedGaussian, linear_potential,
                  make_periodic_environment, make_step_set, sample_iid_environment, step_potential, zero_potential)
from .mc import THREADS_ENV, BudgetExceeded, derive_seeds, parallel_map

EXIT_OK, EXIT_ERROR, EXIT_SCHEMA, EXIT_BUDGET, EXIT_CERT = 0, 1, 2, 3, 4

EXPERIMENTS = {
    "free-energy": "quenched estimate vs annealed value, with the annealing-bound verdict",
    "variational": "minimize K' on a periodic environment, certified against the Perron root",
    "rate-function": "level-1 rate function on a grid of velocities (periodic environment)",
    "disorder": "W_n trajectories, weak/strong-like label and quenched gap",
    "kpz": "bridge fluctuation exponent fit",
    "oracle-suite": "forward recursion vs explicit path enumeration on random instances",
}

SCHEMA: dict[str, dict[str, type | tuple]] = {
    "model": {
        "dist": str, "p": float, "lo": float, "hi": float, "mean": float, "sd": float, "truncation": float,
        "gamma": float, "potential": str, "beta": float, "offsets": list, "values": list, "periods": list,
    },
    "steps": {"d": int, "kind": str},
    "run": {
        "n": int, "n_max": int, "n_grid": list, "samples": int, "master_seed": int, "threads": int,
        "budget": float, "velocities": list, "grid_points": int, "checkpoints": list, "instances": int,
        "ladder": bool,
    },
    "output": {"dir": str, "formats": list},
    "thresholds": {
        "n_ref": int, "n_eval": int, "decay_factor": float, "stability_factor": float, "tol": float,
        "oracle_tol": float,
    },
}
TOP_LEVEL = {"experiment"} | set(SCHEMA)
DISTS = {"bernoulli", "gaussian", "log-gamma", "periodic"}
POTENTIALS = {"linear", "zero", "step"}


class ConfigError(ValueError):
    pass


class CertificationFailure(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------


def _typecheck(section: str, key: str, value: Any, want) -> Any:
    if want is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if want is int and isinstance(value, bool) or not isinstance(value, want):
        raise ConfigError(f"{section}.{key} must be {want.__name__}, got {type(value).__name__}")
    return value


def parse_config(text: str) -> dict:
    """Validate a TOML config; unknown keys and wrong types raise :class:`ConfigError`."""
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"unparseable config: {exc}") from exc
    for key in raw:
        if key not in TOP_LEVEL:
            raise ConfigError(f"unknown key '{key}'")
    cfg: dict[str, Any] = {"experiment": raw.get("experiment")}
    if cfg["experiment"] not in EXPERIMENTS:
        raise ConfigError(f"experiment must be one of {sorted(EXPERIMENTS)}, got {cfg['experiment']!r}")
    for section, fields in SCHEMA.items():
        block = raw.get(section, {})
        if not isinstance(block, dict):
            raise ConfigError(f"'{section}' must be a table")
        cfg[section] = {}
        for key, value in block.items():
            if key not in fields:
                raise ConfigError(f"unknown key '{section}.{key}'")
            cfg[section][key] = _typecheck(section, key, value, fields[key])
    model = cfg["model"]
    if cfg["experiment"] != "oracle-suite":
        if model.get("dist") not in DISTS:
            raise ConfigError(f"model.dist must be one of {sorted(DISTS)}")
        if model.get("potential", "linear") not in POTENTIALS:
            raise ConfigError(f"model.potential must be one of {sorted(POTENTIALS)}")
    formats = cfg["output"].get("formats", ["csv", "json"])
    if not formats or not set(formats) <= {"csv", "json"}:
        raise ConfigError("output.formats must be a non-empty subset of ['csv', 'json']")
    cfg["output"]["formats"] = sorted(set(formats))
    return cfg


def _require(cfg: dict, section: str, key: str):
    if key not in cfg[section]:
        raise ConfigError(f"missing key '{section}.{key}' for experiment '{cfg['experiment']}'")
    return cfg[section][key]


def build_model(cfg: dict) -> Model | PeriodicModel:
    m, s = cfg["model"], cfg["steps"]
    try:
        steps = make_step_set(s.get("d", 2), s.get("kind", "directed"))
    except ValueError as exc:
        raise ConfigError(f"invalid steps: {exc}") from exc
    kind = m.get("potential", "linear")
    if kind == "zero":
        pot = zero_potential(steps.size)
    elif kind == "step":
        pot = step_potential(_require(cfg, "model", "offsets"))
    else:
        pot = linear_potential(m.get("beta", 1.0), steps.size, m.get("offsets"))
    dist_name = m["dist"]
    try:
        if dist_name == "periodic":
            env = make_periodic_environment(_require(cfg, "model", "values"), _require(cfg, "model", "periods"))
            if env.d != steps.d:
                raise ConfigError("model.periods and steps.d disagree")
            return PeriodicModel(env, pot, steps)
        if dist_name == "bernoulli":
            dist = Bernoulli(m.get("p", 0.5), m.get("lo", 0.0), m.get("hi", 1.0))
        elif dist_name == "gaussian":
            dist = TruncatedGaussian(m.get("mean", 0.0), m.get("sd", 1.0), m.get("truncation", 8.0))
        else:
            dist = LogGamma(_require(cfg, "model", "gamma"))
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid model: {exc}") from exc
    return Model(dist, pot, steps)


def _threads(cfg: dict) -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw:
        return max(1, int(raw))
    return max(1, cfg["run"].get("threads", 1))


# ---------------------------------------------------------------------------
# experiments; each returns (json payload, csv columns, csv rows, seeds)
# ---------------------------------------------------------------------------


def _periodic(model, name):
    if not isinstance(model, PeriodicModel):
        raise ConfigError(f"experiment '{name}' needs model.dist = 'periodic'")
    return model


def _free_energy(cfg, model, threads):
    from .freeenergy import FreeEnergyEstimate, annealed_free_energy, bound_verdict, quenched_free_energy_mc
    from .spectral import tilted_free_energy

    run = cfg["run"]
    n, samples, seed = _require(cfg, "run", "n"), run.get("samples", 100), run.get("master_seed", 0)
    q = quenched_free_energy_mc(model, n, samples, seed, threads, run.get("budget"), run.get("ladder", False))
    if isinstance(model, PeriodicModel):
        # the stationary law of a torus is the uniform law over its sites
        V = model.potential(model.env.values.ravel())
        lam_a = float(np.log(model.steps.p * np.exp(V).mean(axis=0).sum()))
        a = FreeEnergyEstimate(lam_a, 0.0, "annealed-closed-form")
        spectral = tilted_free_energy(model.env, model.potential, model.steps)
    else:
        a = annealed_free_energy(model.dist, model.potential, model.steps)
        spectral = None
    gap = a.value - q.value
    verdict, resolved = bound_verdict(q.value, q.ci_halfwidth, a.value)
    payload = {
        "lambda_q": {"value": q.value, "ci": q.ci_halfwidth, "n": n, "samples": samples},
        "lambda_a": {"value": a.value, "exact": a.exact},
        "gap": gap,
        "verdict": verdict,
        "gap_note": "estimated gap" if resolved else "no resolved gap",
        "estimator": "mean of (1/n) log Z_n over seeds, jackknife standard error",
    }
    if "ladder" in q.meta:
        payload["ladder"] = {str(k): v for k, v in q.meta["ladder"]["estimates"].items()}
        payload["richardson"] = q.meta["ladder"]["richardson"]
    if spectral is not None:
        payload["lambda_q_spectral"] = spectral
    rows = [[s, n, z] for s, z in zip(q.meta["seeds"], q.meta["log_Z"])]
    return payload, ["seed", "n", "log_Z"], rows, {"master_seed": seed, "derived": q.meta["seeds"]}


def _variational(cfg, model, threads):
    from .variational import CertificationError, minimize_kprime

    model = _periodic(model, "variational")
    tol = cfg["thresholds"].get("tol", 1e-6)
    try:
        res = minimize_kprime(model.env, model.potential, model.steps, tol=tol)
    except CertificationError as exc:
        raise CertificationFailure(str(exc)) from exc
    payload = res.to_dict()
    rows = [[i, u, s] for i, (u, s) in enumerate(zip(res.field.log_g, res.slack))]
    return payload, ["site", "u", "slack"], rows, {}


def _rate_function(cfg, model, threads):
    from .spectral import rate_function_sweep, rate_sweep_columns, tilted_free_energy, velocity

    model = _periodic(model, "rate-function")
    d = model.steps.d
    if "velocities" in cfg["run"]:
        vs = [list(map(float, v)) for v in cfg["run"]["velocities"]]
        if any(len(v) != d for v in vs):
            raise ConfigError(f"run.velocities entries must have length {d}")
    elif d == 2:
        vs = [[t, 1.0 - t] for t in np.linspace(0.0, 1.0, cfg["run"].get("grid_points", 21))]
    else:
        raise ConfigError("run.velocities is required unless d = 2")
    results = rate_function_sweep(model.env, model.potential, model.steps, vs, threads=threads)
    rows = [list(r.v) + [r.value] + list(r.argmax) + [r.converged] for r in results]
    payload = {
        "lambda_q": tilted_free_energy(model.env, model.potential, model.steps),
        "velocity": velocity(model.env, model.potential, model.steps).tolist(),
        "all_converged": all(r.converged for r in results),
        "points": len(results),
    }
    return payload, rate_sweep_columns(d), rows, {}


def _disorder(cfg, model, threads):
    from .disorder import DisorderThresholds, simulate_martingale

    if isinstance(model, PeriodicModel):
        raise ConfigError("the disorder experiment needs an i.i.d. model")
    run, th = cfg["run"], cfg["thresholds"]
    n_max, samples, seed = _require(cfg, "run", "n_max"), run.get("samples", 100), run.get("master_seed", 0)
    thresholds = DisorderThresholds(th.get("n_ref", 10), th.get("n_eval"), th.get("decay_factor", 10.0),
                                    th.get("stability_factor", 2.0))
    rep = simulate_martingale(model, n_max, samples, seed, thresholds, threads, run.get("budget"))
    checkpoints = run.get("checkpoints")
    if checkpoints is not None and any(not 0 <= int(c) <= n_max for c in checkpoints):
        raise ConfigError("run.checkpoints must lie in [0, n_max]")
    payload = rep.summary(checkpoints)
    return payload, ["seed", "n", "log_W"], rep.csv_rows(checkpoints), {"master_seed": seed, "derived": rep.seeds}


def _kpz(cfg, model, threads):
    from .disorder import bridge_fluctuations

    if isinstance(model, PeriodicModel):
        raise ConfigError("the kpz experiment needs an i.i.d. model")
    run = cfg["run"]
    grid, samples, seed = _require(cfg, "run", "n_grid"), run.get("samples", 200), run.get("master_seed", 0)
    try:
        res = bridge_fluctuations(model, grid, samples, seed, threads, run.get("budget"))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    rows = [[s, int(n), float(res.log_H[i, j])] for i, s in enumerate(res.seeds) for j, n in enumerate(res.n_grid)]
    return res.summary(), ["seed", "n", "log_H"], rows, {"master_seed": seed, "derived": res.seeds}


def _oracle_suite(cfg, model, threads):
    from .env import Box, Bernoulli as B, linear_potential as lin
    from .transfer import bridge_log_H, enumerate_oracle, level_recursion

    run = cfg["run"]
    instances, n_max, seed = run.get("instances", 50), run.get("n_max", 8), run.get("master_seed", 0)
    tol = cfg["thresholds"].get("oracle_tol", 1e-12)
    seeds = derive_seeds(seed, instances)

    def one(args):
        i, s = args
        rng = np.random.default_rng(s)
        d = 2 + i % 2
        steps = make_step_set(d)
        n = int(rng.integers(1, n_max + 1 if d == 2 else min(n_max, 8) + 1))
        pot = lin(float(rng.uniform(-2, 2)), steps.size, rng.uniform(-1, 1, steps.size).tolist())
        env = sample_iid_environment(B(float(rng.uniform(0.1, 0.9)), 0.0, 1.0), Box.cube(-1, n + 2, d), s)
        dp = level_recursion(env, pot, steps, n).log_total
        orc = enumerate_oracle(env, pot, steps, n).log_Z
        row = [s, d, n, dp, orc, abs(dp - orc) / max(abs(orc), 1.0)]
        m = n - n % d
        if m:
            h = bridge_log_H(env, pot, steps, m, 0.0)
            ho = enumerate_oracle(env, pot, steps, m, pin=[m // d] * d).log_Z
            row += [h, ho, abs(h - ho) / max(abs(ho), 1.0)]
        else:
            row += [math.nan, math.nan, 0.0]
        return row

    rows = parallel_map(one, list(enumerate(seeds)), threads)
    worst = max(max(r[5], r[8]) for r in rows)
    payload = {"instances": instances, "max_relative_error": worst, "tolerance": tol, "passed": worst <= tol}
    if worst > tol:
        raise CertificationFailure(f"recursion disagrees with enumeration by {worst:.3g} > {tol:.3g}")
    cols = ["seed", "d", "n", "log_Z_dp", "log_Z_oracle", "rel_err_Z", "log_H_dp", "log_H_oracle", "rel_err_H"]
    return payload, cols, rows, {"master_seed": seed, "derived": seeds}


RUNNERS = {
    "free-energy": _free_energy, "variational": _variational, "rate-function": _rate_function,
    "disorder": _disorder, "kpz": _kpz, "oracle-suite": _oracle_suite,
}


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


def emit_report(payload: dict, columns: list[str], rows: list, formats: list[str], out_dir: Path,
                name: str, config_hash: str) -> list[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    if "csv" in formats:
        paths.append(report.write_csv(out_dir / f"{name}.csv", columns, rows, config_hash=config_hash))
    if "json" in formats:
        paths.append(report.write_json(out_dir / f"{name}.json", {"config_sha256": config_hash, **payload}))
    return [Path(p) for p in paths]


def _versions() -> dict:
    return {"rwrp_lab": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__}


def _write_error(out_dir: Path | None, code: int, exc: BaseException, config_hash: str | None) -> None:
    err = {"exit_code": code, "error": type(exc).__name__, "message": str(exc), "config_sha256": config_hash}
    print(json.dumps(err, sort_keys=True), file=sys.stderr)
    if out_dir is not None:
        try:
            out_dir.mkdir(parents=True, exist_ok=True)
            report.write_json(out_dir / "error.json", err)
        except OSError:
            pass


def run_experiment(config_path: str | os.PathLike, out_dir: str | os.PathLike | None = None) -> int:
    path = Path(config_path)
    out: Path | None = Path(out_dir) if out_dir is not None else None
    config_hash = None
    try:
        data = path.read_bytes()
        config_hash = hashlib.sha256(data).hexdigest()
        cfg = parse_config(data.decode("utf-8"))
        if out is None:
            out = Path(cfg["output"].get("dir", "rwrp_out"))
        model = build_model(cfg) if cfg["experiment"] != "oracle-suite" else None
        t0 = time.perf_counter()
        payload, cols, rows, seeds = RUNNERS[cfg["experiment"]](cfg, model, _threads(cfg))
        wall = time.perf_counter() - t0
        name = cfg["experiment"].replace("-", "_")
        paths = emit_report(payload, cols, rows, cfg["output"]["formats"], out, name, config_hash)
        manifest = {
            "config_sha256": config_hash, "config_path": str(path), "experiment": cfg["experiment"],
            "versions": _versions(), "wall_time_s": wall, "seeds": seeds, "outputs": [p.name for p in paths],
            "timestamp": datetime.now(timezone.utc).isoformat(),
        }
        report.write_json(out / "manifest.json", manifest)
        print(json.dumps({"experiment": cfg["experiment"], "outputs": [str(p) for p in paths]}))
        return EXIT_OK
    except (ConfigError, OSError, UnicodeDecodeError) as exc:
        _write_error(out, EXIT_SCHEMA, exc, config_hash)
        return EXIT_SCHEMA
    except BudgetExceeded as exc:
        _write_error(out, EXIT_BUDGET, exc, config_hash)
        return EXIT_BUDGET
    except CertificationFailure as exc:
        _write_error(out, EXIT_CERT, exc, config_hash)
        return EXIT_CERT
    except Exception as exc:  # noqa: BLE001 - reported, never swallowed
        _write_error(out, EXIT_ERROR, exc, config_hash)
        return EXIT_ERROR


def validate(config_path) -> int:
    try:
        cfg = parse_config(Path(config_path).read_text())
        if cfg["experiment"] != "oracle-suite":
            build_model(cfg)
    except (ConfigError, OSError) as exc:
        _write_error(None, EXIT_SCHEMA, exc, None)
        return EXIT_SCHEMA
    print(f"ok: {cfg['experiment']}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="rwrp-lab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run an experiment config")
    p_run.add_argument("config")
    p_run.add_argument("--out", help="output directory (overrides output.dir)")
    p_val = sub.add_parser("validate", help="check a config without running it")
    p_val.add_argument("config")
    sub.add_parser("list-experiments", help="list experiment names")
    args = parser.parse_args(argv)
    if args.command == "run":
        return run_experiment(args.config, args.out)
    if args.command == "validate":
        return validate(args.config)
    for name, desc in EXPERIMENTS.items():
        print(f"{name:15s} {desc}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
