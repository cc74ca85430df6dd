"""Experiment orchestration for the ``run``, ``lln``, ``clt`` and ``validate`` commands."""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .checks import validate_model
from .config import ExperimentConfig
from .diagnostics import clt_covariance_check, lln_convergence_report, report_json
from .engine import run_trajectory
from .errors import ConfigError
from .fluctuation import FluctuationSample, write_fluctuations_csv
from .limit import DensityGrid, solve_limit_finite, solve_percolation_density

EXIT_PASS, EXIT_ERROR, EXIT_FAIL = 0, 1, 2
SUBCOMMANDS = ("run", "lln", "clt", "validate")


@dataclass
class RunManifest:
    subcommand: str
    config_hash: str
    version: str
    seed: int
    replica_seeds: list
    outputs: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    verdict: str = "pass"

    def to_dict(self) -> dict:
        return asdict(self)


class _Outputs:
    """Writes files under one directory and records their hashes."""

    def __init__(self, root: Path):
        self.root = root
        root.mkdir(parents=True, exist_ok=True)
        self.hashes: dict[str, str] = {}

    def text(self, name: str, writer) -> None:
        path = self.root / name
        with open(path, "w", newline="") as fh:
            writer(fh)
        self.hashes[name] = hashlib.sha256(path.read_bytes()).hexdigest()

    def json(self, name: str, obj) -> None:
        self.text(name, lambda fh: (json.dump(report_json(obj), fh, indent=2, sort_keys=True),
                                    fh.write("\n")))


def _snapshots_csv(traj, fh) -> None:
    fh.write("# empirical measure at sample times; time in model time units; "
             "mass is the fraction of agents of the type\n")
    w = csv.writer(fh, lineterminator="\n")
    if traj.space.is_finite:
        w.writerow(("time", "type", "count", "mass"))
        for t, counts in zip(traj.sample_times, traj.samples):
            for lab, c in zip(traj.space.labels, counts):
                w.writerow((repr(t), lab, c, repr(c / traj.N)))
    else:
        w.writerow(("time", "agent", "type"))
        for t, types in zip(traj.sample_times, traj.samples):
            for i, x in enumerate(types):
                w.writerow((repr(t), i, repr(float(x))))


def _limit_for(cfg: ExperimentConfig, T: float, dt: float):
    model = cfg.model
    if model.space.is_finite:
        return solve_limit_finite(model, np.asarray(cfg.initial_law(), float), T, dt)
    grid = cfg.analysis.get("density_grid")
    law = cfg.initial.get("law")
    if grid is None or not isinstance(law, dict):
        return None
    g0 = DensityGrid.gaussian(law["mean"], law["sd"], grid["lo"], grid["hi"], grid["dx"],
                              model.lambda_bar)
    return solve_percolation_density(g0, T, dt, grid.get("leakage_bound", 1e-3))


def _sample_times(cfg: ExperimentConfig, T: float) -> list[float]:
    run = cfg.run
    if "sample_times" in run:
        return sorted(float(t) for t in run["sample_times"])
    return np.linspace(0.0, T, run.get("n_sample_times", 11)).tolist()


def _do_run(cfg, out, seed, replicas, workers):
    T = float(cfg.run["T"])
    N = cfg.run.get("N")
    times = _sample_times(cfg, T)
    if any(t > T for t in times):
        raise ConfigError("run.sample_times must not exceed T")
    events = cfg.output.get("events", True)
    for r in range(replicas):
        init = cfg.initial_configuration(N, seed, r)
        traj = run_trajectory(cfg.model, init, T, seed, r, sample_times=times, record=events)
        if events:
            out.text(f"events_r{r}.csv", traj.to_csv)
        out.text(f"snapshots_r{r}.csv", lambda fh, tr=traj: _snapshots_csv(tr, fh))
    lim = _limit_for(cfg, T, float(cfg.run.get("dt", 1e-3)))
    if lim is not None:
        out.text("limit.csv", lim.to_csv)
    return "pass"


def _do_lln(cfg, out, seed, replicas, workers):
    N_list = cfg.run.get("N_list")
    if not N_list or len(N_list) < 3:
        raise ConfigError("lln needs run.N_list with at least 3 values of N")
    metric = cfg.analysis.get("metric", "TV" if cfg.model.space.is_finite else "KS")
    band = cfg.analysis.get("slope_band")
    rep = lln_convergence_report(cfg.model, cfg.initial_law(), N_list, replicas,
                                 float(cfg.run["T"]), metric, seed,
                                 cfg.run.get("n_sample_times", 50), float(cfg.run.get("dt", 1e-3)),
                                 cfg.analysis.get("density_grid"),
                                 tuple(band) if band else None, workers)
    out.json("lln_report.json", rep.to_dict())

    def errors_csv(fh):
        fh.write("# per-replica sup over sample times of the distance between empirical "
                 f"measure and limit ({metric}); dimensionless\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("N", "replica", "sup_error"))
        for N, row in zip(rep.N, rep.errors):
            for r, e in enumerate(row):
                w.writerow((N, r, repr(e)))

    out.text("lln_errors.csv", errors_csv)
    if rep.passed is None:
        return "degenerate" if rep.degenerate else "pass"
    return "pass" if rep.passed else "fail"


def _do_clt(cfg, out, seed, replicas, workers):
    N = cfg.run.get("N")
    if N is None:
        raise ConfigError("clt needs run.N")
    T = float(cfg.run["T"])
    rep, sigma = clt_covariance_check(cfg.model, cfg.initial_law(), N, replicas, T,
                                      float(cfg.analysis.get("tolerance", 0.15)), seed,
                                      float(cfg.run.get("dt", 1e-3)), workers)
    out.json("clt_report.json", rep.to_dict())
    out.text("fluctuations.csv", lambda fh: write_fluctuations_csv(
        fh, [FluctuationSample(np.array([T]), row[None, :], N, r) for r, row in enumerate(sigma)]))
    return "pass" if rep.passed else "fail"


def _do_validate(cfg, out, seed, replicas, workers):
    results = validate_model(cfg.model, seed)
    out.json("validate_report.json",
             {"description": "kernel-consistency checks of the model at random population states",
              "checks": [asdict(r) for r in results]})
    return "pass" if all(r.passed for r in results) else "fail"


HANDLERS = {"run": _do_run, "lln": _do_lln, "clt": _do_clt, "validate": _do_validate}


def run_experiment(cfg: ExperimentConfig, subcommand: str, out_dir=None, seed: int | None = None,
                   replicas: int | None = None, workers: int | None = None) -> tuple[RunManifest, int]:
    """Execute one subcommand; returns the manifest and the process exit code."""
    if subcommand not in HANDLERS:
        raise ConfigError(f"unknown subcommand {subcommand!r}")
    seed = int(cfg.run["seed"] if seed is None else seed)
    replicas = int(cfg.run.get("replicas", 1) if replicas is None else replicas)
    if replicas < 1:
        raise ConfigError("replicas must be >= 1")
    root = Path(out_dir or cfg.output.get("dir", "out"))
    out = _Outputs(root)
    t0 = time.perf_counter()
    verdict = HANDLERS[subcommand](cfg, out, seed, replicas, workers)
    man = RunManifest(subcommand, cfg.digest(), __version__, seed,
                      [[seed, r] for r in range(replicas)], dict(out.hashes),
                      {"wall_seconds": round(time.perf_counter() - t0, 3)}, verdict)
    out.json("manifest.json", man.to_dict())
    return man, (EXIT_FAIL if verdict == "fail" else EXIT_PASS)
