"""Command line front end.

Subcommands ``predict``, ``simulate``, ``minima``, ``sweep``, ``validate`` and
``mse`` read a JSON run configuration and write a CSV table plus a JSON
metadata sidecar into the output directory. Exit codes: 0 success, 2 config
error, 3 numerical failure, 4 validation failure.

Configuration schema (all keys except ``scenario`` optional)::

    {
      "scenario": {"elements": 10, "spacing": 0.25, "doas": [16, 18, 60, -50],
                   "units": "degrees", "snapshots": 100, "noise_power": 1.0,
                   "correlation": null, "source_cov": null},
      "methods": ["CML", "UML"],
      "snr_db": [-5, 0, 5, 10],
      "trials": 1000,
      "seed": 0,
      "qmc_budget": 65536,
      "search": {"starts": null, "eps": 0.0262, "cluster_threshold": 0.6},
      "mse": {"starts": 32, "trials": null},
      "mse_small": null,
      "threads": null,
      "output": {"dir": "."},
      "validate": {"tolerances": {...}, "clt_trials": 400}
    }

``correlation`` is a K x K matrix scaled by the per-source power; ``source_cov``
overrides the SNR grid with an absolute source covariance (the SNR column then
only labels rows). Complex matrix entries are given as ``[re, im]`` pairs.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import platform
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .array_model import DEFAULT_EPS, Manifold, Scenario, ThetaPoint, electrical_from_degrees
from .asy_cov import (PointFamily, gamma1_closed, gamma2_closed, gamma_c, gamma_c_oracle,
                      gamma_numeric_oracle, oracle_factor)
from .det_equiv import (deterministic_cost, eta_bar_cml, eta_bar_cml_contour, eta_bar_uml,
                        eta_bar_uml_contour, integral_I_closed, integral_I_numeric, projected_spectrum)
from .errors import ConfigError, NumericalError, RegimeError, ValidationFailure
from .ml_costs import METHODS, projectors
from .montecarlo import (SearchConfig, THREADS_ENV, TrialBatch, clt_stats, default_threads,
                         empirical_mse, empirical_resolution)
from .resolution import CLUSTER_THRESHOLD, analyze, find_local_minima, project_feasible

log = logging.getLogger("mldoa")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_VALIDATION = 0, 2, 3, 4
COLUMNS = ("method", "snr_db", "p_res_pred", "p_res_err", "p_res_emp", "ci_lo", "ci_hi",
           "mse_pred", "mse_emp", "L_minima")
TEXT_COLUMNS = ("method", "check", "passed")
INT_COLUMNS = ("L_minima", "index")
DEFAULT_TOLERANCES = {"prop1": 1e-8, "eta_bar": 1e-8, "gamma": 1e-6, "clt_mean_se": 4.0}


# configuration

@dataclass
class ScenarioConfig:
    elements: int
    doas: np.ndarray
    snapshots: int
    spacing: float = 0.25
    noise_power: float = 1.0
    correlation: np.ndarray | None = None
    source_cov: np.ndarray | None = None

    def build(self, snr_db: float, eps: float) -> Scenario:
        man = Manifold(self.elements, self.spacing)
        th = ThetaPoint(self.doas, eps)
        if self.source_cov is not None:
            return Scenario(man, th, self.source_cov, self.noise_power, self.snapshots)
        return Scenario.equal_power(man, th, snr_db, self.snapshots, self.noise_power, self.correlation)


@dataclass
class RunConfig:
    scenario: ScenarioConfig
    methods: list = field(default_factory=lambda: list(METHODS))
    snr_db: list = field(default_factory=lambda: [0.0])
    trials: int = 0
    seed: int = 0
    qmc_budget: int = 2 ** 16
    starts: int | None = None
    eps: float = DEFAULT_EPS
    cluster_threshold: float = CLUSTER_THRESHOLD
    mse_starts: int = 32
    mse_trials: int | None = None
    mse_small: float | None = None
    threads: int | None = None
    out_dir: str = "."
    tolerances: dict = field(default_factory=lambda: dict(DEFAULT_TOLERANCES))
    clt_trials: int = 400
    raw: dict = field(default_factory=dict, repr=False)


def _field(d: dict, key: str, kind, where: str, default=None, required=False):
    if key not in d or d[key] is None:
        if required:
            raise ConfigError(f"{where}.{key}: required field missing")
        return default
    v = d[key]
    try:
        if kind is int:
            if isinstance(v, bool) or float(v) != int(v):
                raise ValueError
            return int(v)
        if kind is float:
            if isinstance(v, bool):
                raise ValueError
            out = float(v)
            if not math.isfinite(out):
                raise ValueError
            return out
        return kind(v)
    except (TypeError, ValueError):
        raise ConfigError(f"{where}.{key}: expected {kind.__name__}, got {v!r}") from None


def _matrix(v, where: str, k: int) -> np.ndarray:
    try:
        a = np.asarray(v, dtype=float)
        if a.ndim == 3 and a.shape[-1] == 2:
            a = a[..., 0] + 1j * a[..., 1]
    except (TypeError, ValueError):
        raise ConfigError(f"{where}: not a numeric matrix") from None
    if a.shape != (k, k):
        raise ConfigError(f"{where}: expected a {k}x{k} matrix, got shape {a.shape}")
    return a


def parse_config(data: dict) -> RunConfig:
    """Validate a decoded JSON object; errors name the offending field."""
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    sc = data.get("scenario")
    if not isinstance(sc, dict):
        raise ConfigError("scenario: required object missing")
    units = sc.get("units", "degrees")
    if units not in ("degrees", "radians"):
        raise ConfigError(f"scenario.units: expected 'degrees' or 'radians', got {units!r}")
    doas = sc.get("doas")
    try:
        doas = np.atleast_1d(np.asarray(doas, dtype=float))
    except (TypeError, ValueError):
        raise ConfigError("scenario.doas: expected a list of numbers") from None
    if doas.ndim != 1 or doas.size == 0 or not np.all(np.isfinite(doas)):
        raise ConfigError("scenario.doas: expected a nonempty list of finite numbers")
    if units == "degrees":
        if np.any(np.abs(doas) >= 90):
            raise ConfigError("scenario.doas: physical angles must lie in (-90, 90) degrees")
        doas = electrical_from_degrees(doas)
    order = np.argsort(doas, kind="stable")
    doas = doas[order]
    k = doas.size
    elements = _field(sc, "elements", int, "scenario", required=True)
    snapshots = _field(sc, "snapshots", int, "scenario", required=True)
    if elements < 2 or k >= elements:
        raise ConfigError(f"scenario.elements: need more sensors than sources (M={elements}, K={k})")
    if snapshots < 1:
        raise ConfigError("scenario.snapshots: must be >= 1")
    if snapshots == k:
        raise RegimeError(f"boundary regime unsupported: K = N = {k}")
    corr = sc.get("correlation")
    scov = sc.get("source_cov")
    scen = ScenarioConfig(
        elements, doas, snapshots,
        spacing=_field(sc, "spacing", float, "scenario", 0.25),
        noise_power=_field(sc, "noise_power", float, "scenario", 1.0),
        correlation=None if corr is None else _matrix(corr, "scenario.correlation", k)[np.ix_(order, order)],
        source_cov=None if scov is None else _matrix(scov, "scenario.source_cov", k)[np.ix_(order, order)])
    if not scen.spacing > 0 or not scen.noise_power > 0:
        raise ConfigError("scenario.spacing and scenario.noise_power must be positive")

    methods = data.get("methods", list(METHODS))
    if isinstance(methods, str):
        methods = [methods]
    if not isinstance(methods, list) or not methods or any(m not in METHODS for m in methods):
        raise ConfigError(f"methods: expected a nonempty subset of {list(METHODS)}, got {methods!r}")
    snr = data.get("snr_db", [0.0])
    snr = [snr] if isinstance(snr, (int, float)) else snr
    try:
        snr = [float(s) for s in snr]
    except (TypeError, ValueError):
        raise ConfigError("snr_db: expected a list of numbers") from None
    if not snr or any(not math.isfinite(s) for s in snr):
        raise ConfigError("snr_db: grid must be nonempty and finite")
    if any(b <= a for a, b in zip(snr, snr[1:])):
        raise ConfigError("snr_db: grid must be strictly ascending")

    search = data.get("search", {}) or {}
    mse = data.get("mse", {}) or {}
    val = data.get("validate", {}) or {}
    out = data.get("output", {}) or {}
    for name, obj in (("search", search), ("mse", mse), ("validate", val), ("output", out)):
        if not isinstance(obj, dict):
            raise ConfigError(f"{name}: expected an object")
    cfg = RunConfig(
        scen, list(methods), snr,
        trials=_field(data, "trials", int, "config", 0),
        seed=_field(data, "seed", int, "config", 0),
        qmc_budget=_field(data, "qmc_budget", int, "config", 2 ** 16),
        starts=_field(search, "starts", int, "search", None),
        eps=_field(search, "eps", float, "search", DEFAULT_EPS),
        cluster_threshold=_field(search, "cluster_threshold", float, "search", CLUSTER_THRESHOLD),
        mse_starts=_field(mse, "starts", int, "mse", 32),
        mse_trials=_field(mse, "trials", int, "mse", None),
        mse_small=_field(data, "mse_small", float, "config", None),
        threads=_field(data, "threads", int, "config", None),
        out_dir=str(out.get("dir", ".")),
        clt_trials=_field(val, "clt_trials", int, "validate", 400),
        raw=data)
    tol = val.get("tolerances", {}) or {}
    unknown = set(tol) - set(DEFAULT_TOLERANCES)
    if unknown:
        raise ConfigError(f"validate.tolerances: unknown checks {sorted(unknown)}")
    for key in tol:
        cfg.tolerances[key] = _field(tol, key, float, "validate.tolerances")
    if cfg.trials < 0:
        raise ConfigError("config.trials: must be >= 0")
    if cfg.qmc_budget < 1000:
        raise ConfigError("config.qmc_budget: must be >= 1000")
    if cfg.starts is not None and cfg.starts < 0:
        raise ConfigError("search.starts: must be >= 0")
    if not cfg.eps > 0 or not cfg.cluster_threshold > 0:
        raise ConfigError("search.eps and search.cluster_threshold must be positive")
    if cfg.mse_small is not None and cfg.mse_small < 0:
        raise ConfigError("config.mse_small: must be >= 0")
    if cfg.threads is not None and cfg.threads < 1:
        raise ConfigError("config.threads: must be >= 1")
    if cfg.seed < 0:
        raise ConfigError("config.seed: must be >= 0")
    try:
        ThetaPoint(doas, cfg.eps)
    except ValueError as exc:
        raise ConfigError(f"scenario.doas: {exc}") from None
    return cfg


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    return parse_config(data)


# tables

def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    x = float(v)
    return "" if math.isnan(x) else format(x, ".17g")


def write_table(path, rows, columns=COLUMNS) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in columns])


def read_table(path) -> list[dict]:
    """Parse a table written by :func:`write_table`; empty cells become None."""
    out = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            row = {}
            for key, val in rec.items():
                if key in TEXT_COLUMNS:
                    row[key] = val
                elif val == "":
                    row[key] = None
                elif key in INT_COLUMNS:
                    row[key] = int(val)
                else:
                    try:
                        row[key] = float(val)
                    except ValueError:
                        row[key] = val
            out.append(row)
    return out


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    if isinstance(obj, (np.floating, float)):
        return None if not math.isfinite(float(obj)) else float(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def write_sidecar(path, command: str, cfg: RunConfig, threads: int, timings: dict, extra: dict) -> None:
    meta = {
        "command": command,
        "config": cfg.raw,
        "seed": cfg.seed,
        "threads": threads,
        "versions": {"mldoa": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
        "timings_s": timings,
    }
    meta.update(extra)
    Path(path).write_text(json.dumps(_jsonable(meta), indent=2, allow_nan=False))


# commands

class Runner:
    def __init__(self, cfg: RunConfig, threads: int):
        self.cfg = cfg
        self.threads = threads
        self.timings: dict = {}
        self.meta: dict = {"rows": []}

    def scenario(self, snr: float) -> Scenario:
        return self.cfg.scenario.build(snr, self.cfg.eps)

    def _timed(self, key, fn, *a, **kw):
        t = time.perf_counter()
        out = fn(*a, **kw)
        self.timings[key] = self.timings.get(key, 0.0) + time.perf_counter() - t
        return out

    def analyze(self, method, sc, snr):
        c = self.cfg
        return self._timed("predict", analyze, method, sc, snr, c.eps, c.starts, c.cluster_threshold,
                           c.seed, c.qmc_budget, c.mse_small)

    def grid(self):
        for method in self.cfg.methods:
            for snr in self.cfg.snr_db:
                log.info("%s at %g dB", method, snr)
                yield method, snr, self.scenario(snr)

    def rows(self, predict: bool, simulate: bool, mse_emp: bool) -> list[dict]:
        c = self.cfg
        if (simulate or mse_emp) and c.trials < 1:
            raise ConfigError("config.trials: simulation needs trials >= 1")
        rows = []
        for method, snr, sc in self.grid():
            rep = self.analyze(method, sc, snr)
            row = {"method": method, "snr_db": snr, "L_minima": rep.n_extra}
            info = {"method": method, "snr_db": snr, "search": rep.minima.metadata,
                    "gamma_diagnostics": rep.gamma.diagnostics,
                    "points": [p for p in rep.family.points]}
            if predict:
                row.update(p_res_pred=rep.p_res_predicted, p_res_err=rep.qmc_error,
                           mse_pred=rep.mse_predicted)
            if simulate:
                if rep.n_extra == 0:
                    row.update(p_res_emp=1.0, ci_lo=None, ci_hi=None)
                else:
                    batch = TrialBatch(c.trials, c.seed, sc, rep.family)
                    p, (lo, hi) = self._timed("simulate", empirical_resolution, batch, method, self.threads)
                    row.update(p_res_emp=p, ci_lo=lo, ci_hi=hi)
            if mse_emp:
                batch = TrialBatch(c.mse_trials or c.trials, c.seed, sc, rep.family)
                res = self._timed("mse", empirical_mse, batch, method,
                                  SearchConfig(c.mse_starts, c.eps, seed=c.seed), self.threads)
                row["mse_emp"] = res.mse
                info["mse_fail_fraction"] = res.fail_fraction
                if not predict:
                    row["mse_pred"] = rep.mse_predicted
            rows.append(row)
            self.meta["rows"].append(info)
        return rows

    def minima_rows(self) -> tuple[list[dict], tuple]:
        c = self.cfg
        k = c.scenario.doas.size
        cols = ("method", "snr_db", "index", "cost", "global") + tuple(f"theta_{i + 1}" for i in range(k))
        rows = []
        for method, snr, sc in self.grid():
            cost = deterministic_cost(method, sc.covariance, sc.manifold, sc.n)
            mins = self._timed("minima", find_local_minima, cost, sc.k, c.eps, c.starts, c.seed,
                               c.cluster_threshold, extra_starts=sc.true_theta.angles[None, :], method=method)
            for i, (p, f) in enumerate(zip(mins.points, mins.costs)):
                r = {"method": method, "snr_db": snr, "index": i, "cost": f,
                     "global": float(i == mins.global_index)}
                r.update({f"theta_{j + 1}": v for j, v in enumerate(p)})
                rows.append(r)
            self.meta["rows"].append({"method": method, "snr_db": snr, "search": mins.metadata})
        return rows, cols


def _rel(a, b):
    return abs(a - b) / max(abs(b), 1e-300)


def validation_checks(cfg: RunConfig) -> list[dict]:
    """Oracle suite on the configured scenario at its first SNR."""
    tol = cfg.tolerances
    sc = cfg.scenario.build(cfg.snr_db[0], cfg.eps)
    r, n = sc.covariance, sc.n
    # a second point away from the truth for the covariance checks
    other = project_feasible(sc.true_theta.angles + 0.4, cfg.eps).angles
    pr = projectors(sc.steering)
    pf = PointFamily(r, sc.manifold, [sc.true_theta.angles, other], n, cfg.eps)
    results = []

    def check(name, fn, limit):
        t = time.perf_counter()
        try:
            err = float(fn())
            ok = bool(err <= limit)
            msg = ""
        except (ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
            err, ok, msg = float("nan"), False, str(exc)
        results.append({"check": name, "error": err, "tolerance": limit, "passed": ok,
                        "seconds": time.perf_counter() - t, "message": msg})

    spec = projected_spectrum(r, pr)
    check("prop1_contour", lambda: _rel(integral_I_numeric(spec, n), integral_I_closed(spec, n)), tol["prop1"])
    check("eta_bar_cml_contour", lambda: _rel(eta_bar_cml_contour(r, pr, n), eta_bar_cml(r, pr)), tol["eta_bar"])
    check("eta_bar_uml_contour", lambda: _rel(eta_bar_uml_contour(r, pr, n), eta_bar_uml(r, pr, n)), tol["eta_bar"])
    check("gamma_c_oracle", lambda: _rel(gamma_c_oracle(pf, 1, 1), gamma_c(pf)[1, 1]), tol["gamma"])
    check("gamma1_oracle", lambda: _rel(
        gamma_numeric_oracle(oracle_factor(pf, 0), oracle_factor(pf, 1), n, "z", "log"),
        gamma1_closed(pf, 0, 1)), tol["gamma"])
    check("gamma2_oracle", lambda: _rel(
        gamma_numeric_oracle(oracle_factor(pf, 1), oracle_factor(pf, 1), n, "log", "log"),
        gamma2_closed(pf, 1, 1)), tol["gamma"])

    def clt(method):
        st = clt_stats(TrialBatch(cfg.clt_trials, cfg.seed, sc, pf), method)
        return float(np.max(np.abs(st.sample_mean) / st.mean_stderr))
    for method in cfg.methods:
        check(f"clt_mean_{method.lower()}", lambda m=method: clt(m), tol["clt_mean_se"])
    return results


def run(command: str, cfg: RunConfig, threads: int, out_dir: Path) -> int:
    out_dir.mkdir(parents=True, exist_ok=True)
    runner = Runner(cfg, threads)
    csv_path, meta_path = out_dir / f"{command}.csv", out_dir / f"{command}.json"
    t0 = time.perf_counter()
    status = EXIT_OK
    if command == "predict":
        write_table(csv_path, runner.rows(predict=True, simulate=False, mse_emp=False))
    elif command == "simulate":
        write_table(csv_path, runner.rows(predict=False, simulate=True, mse_emp=False))
    elif command == "sweep":
        write_table(csv_path, runner.rows(predict=True, simulate=True, mse_emp=False))
    elif command == "mse":
        write_table(csv_path, runner.rows(predict=True, simulate=False, mse_emp=cfg.trials > 0))
    elif command == "minima":
        rows, cols = runner.minima_rows()
        write_table(csv_path, rows, cols)
    elif command == "validate":
        checks = validation_checks(cfg)
        cols = ("check", "error", "tolerance", "passed", "seconds")
        write_table(csv_path, [dict(c, passed=str(c["passed"]).lower()) for c in checks], cols)
        runner.meta["checks"] = checks
        for c in checks:
            print(f"{'PASS' if c['passed'] else 'FAIL'} {c['check']}: error {c['error']:.3e} "
                  f"(tolerance {c['tolerance']:.1e}, {c['seconds']:.2f} s) {c['message']}".rstrip())
        if not all(c["passed"] for c in checks):
            status = EXIT_VALIDATION
    else:
        raise ConfigError(f"unknown command {command!r}")
    runner.timings["total"] = time.perf_counter() - t0
    write_sidecar(meta_path, command, cfg, threads, runner.timings, runner.meta)
    log.info("wrote %s", csv_path)
    if status == EXIT_VALIDATION:
        raise ValidationFailure("one or more validation checks failed")
    return status


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mldoa", description="ML DoA resolution probability toolkit")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    helps = {"predict": "predicted resolution probability and MSE",
             "simulate": "Monte Carlo resolution probability",
             "minima": "local minima of the deterministic cost surfaces",
             "sweep": "prediction and simulation side by side",
             "validate": "oracle checks with pass/fail report",
             "mse": "predicted and simulated mean squared error"}
    for name, h in helps.items():
        s = sub.add_parser(name, help=h)
        s.add_argument("--config", required=True, help="JSON run configuration")
        s.add_argument("--seed", type=int, help="master seed (overrides the config)")
        s.add_argument("--threads", type=int,
                       help=f"worker threads (overrides the config and ${THREADS_ENV})")
        s.add_argument("--out", help="output directory (overrides the config)")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("--seed must be >= 0")
            cfg.seed = args.seed
        if args.threads is not None:
            threads = args.threads
        elif cfg.threads is not None:
            threads = cfg.threads
        else:
            threads = default_threads()
        if threads < 1:
            raise ConfigError("--threads must be >= 1")
        out_dir = Path(args.out if args.out is not None else cfg.out_dir)
        return run(args.command, cfg, threads, out_dir)
    except (ConfigError, RegimeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValidationFailure as exc:
        print(f"validation failed: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (NumericalError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
