"""Statistical verdicts: convergence rates, covariance comparison, normality and
distribution-equality tests."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Any, Sequence

import numpy as np
from scipy import stats

from .engine import initial_law_vector, run_trajectory, sample_product_initial
from .errors import ConfigError, UnsupportedError
from .fluctuation import multinomial_covariance, solve_clt_covariance
from .limit import DensityGrid, interpolate_limit, solve_limit_finite, solve_percolation_density
from .measure import ks_distance, tv_distance
from .models import ModelSpec, require_kernels
from .parallel import replica_map

NORMALITY_Z = 4.0
MIN_NORMALITY_SAMPLES = 500
MIN_CLT_REPLICAS = 100
MIN_EXPECTED = 5.0


def provenance(model: ModelSpec, **extra) -> dict:
    """Everything needed to rerun a report bit-for-bit."""
    from . import __version__
    return {"model": model.provenance(), "version": __version__, **extra}


# ------------------------------------------------------------------ normality

@dataclass
class NormalityResult:
    n: int
    skewness: float
    excess_kurtosis: float
    z_skewness: float
    z_kurtosis: float
    degenerate: bool
    passed: bool


def normality_check(samples, z_max: float = NORMALITY_Z) -> NormalityResult:
    """Skewness and excess-kurtosis z-scores under a normal null.

    Zero-variance input is flagged ``degenerate`` rather than failed.
    """
    x = np.asarray(samples, dtype=float).ravel()
    n = x.size
    if n < MIN_NORMALITY_SAMPLES:
        raise ValueError(f"need at least {MIN_NORMALITY_SAMPLES} samples, got {n}")
    if np.ptp(x) == 0:
        return NormalityResult(n, 0.0, 0.0, 0.0, 0.0, True, True)
    g1 = float(stats.skew(x, bias=False))
    g2 = float(stats.kurtosis(x, fisher=True, bias=False))
    se1 = math.sqrt(6.0 * n * (n - 1) / ((n - 2) * (n + 1) * (n + 3)))
    se2 = math.sqrt(24.0 * n * (n - 1) ** 2 / ((n - 3) * (n - 2) * (n + 3) * (n + 5)))
    z1, z2 = g1 / se1, g2 / se2
    return NormalityResult(n, g1, g2, z1, z2, False, abs(z1) <= z_max and abs(z2) <= z_max)


# ---------------------------------------------------------- chi-square tests

def _pool(expected: np.ndarray, min_expected: float) -> list[list[int]]:
    """Group cell indices so every group's expected count reaches ``min_expected``."""
    order = np.argsort(expected, kind="stable")
    groups: list[list[int]] = []
    current: list[int] = []
    acc = 0.0
    for i in order:
        current.append(int(i))
        acc += expected[i]
        if acc >= min_expected:
            groups.append(current)
            current, acc = [], 0.0
    if current:
        if not groups:
            raise ValueError("too few counts for a chi-square test even after pooling")
        groups[-1].extend(current)
    return groups


@dataclass
class ChiSquareResult:
    statistic: float
    dof: int
    p_value: float
    cells: int


def chi_square_equality(counts_a, counts_b, min_expected: float = MIN_EXPECTED) -> ChiSquareResult:
    """Two-sample chi-square test that two count vectors share one distribution."""
    a = np.asarray(counts_a, dtype=float)
    b = np.asarray(counts_b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("count vectors must share one category axis")
    na, nb = a.sum(), b.sum()
    if na <= 0 or nb <= 0:
        raise ValueError("both samples must be nonempty")
    keep = (a + b) > 0
    a, b = a[keep], b[keep]
    tot = a + b
    ea, eb = tot * na / (na + nb), tot * nb / (na + nb)
    groups = _pool(np.minimum(ea, eb), min_expected)
    if len(groups) < 2:
        raise ValueError("fewer than two cells remain after pooling")
    A = np.array([a[g].sum() for g in groups])
    B = np.array([b[g].sum() for g in groups])
    EA = np.array([ea[g].sum() for g in groups])
    EB = np.array([eb[g].sum() for g in groups])
    stat = float(np.sum((A - EA) ** 2 / EA) + np.sum((B - EB) ** 2 / EB))
    dof = len(groups) - 1
    return ChiSquareResult(stat, dof, float(stats.chi2.sf(stat, dof)), len(groups))


def goodness_of_fit(counts, probs, min_expected: float = MIN_EXPECTED) -> ChiSquareResult:
    """One-sample chi-square test of observed counts against probabilities."""
    c = np.asarray(counts, dtype=float)
    p = np.asarray(probs, dtype=float)
    if c.shape != p.shape:
        raise ValueError("counts and probabilities differ in length")
    if abs(p.sum() - 1.0) > 1e-9:
        raise ValueError("probabilities must sum to 1")
    if np.any(c[p == 0] > 0):
        return ChiSquareResult(math.inf, max(int(np.sum(p > 0)) - 1, 1), 0.0, int(c.size))
    keep = p > 0
    c, p = c[keep], p[keep]
    if c.size == 1:
        # point mass and every draw on it
        return ChiSquareResult(0.0, 0, 1.0, 1)
    e = p * c.sum()
    groups = _pool(e, min_expected)
    if len(groups) < 2:
        raise ValueError("fewer than two cells remain after pooling")
    obs = np.array([c[g].sum() for g in groups])
    exp = np.array([e[g].sum() for g in groups])
    res = stats.chisquare(obs, exp)
    return ChiSquareResult(float(res.statistic), len(groups) - 1, float(res.pvalue), len(groups))


# ----------------------------------------------------------------------- LLN

@dataclass
class LlnReport:
    metric: str
    N: list
    replicas: int
    mean_error: list
    std_error: list
    slope: float | None
    slope_ci: tuple | None
    degenerate: bool
    sample_times: list
    band: tuple | None = None
    passed: bool | None = None
    errors: list = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["description"] = ("mean over replicas of the sup over sample times of the distance "
                            "between empirical measure and limit; slope of log error vs log N")
        return d


def fit_loglog_slope(N, mean, se) -> tuple[float | None, tuple | None, bool]:
    """OLS slope of log(mean) on log(N) with a 95% interval from replica errors.

    Each log-mean has variance (se/mean)^2 to first order, so the interval
    narrows like 1/sqrt(replicas).
    """
    N = np.asarray(N, dtype=float)
    m = np.asarray(mean, dtype=float)
    s = np.asarray(se, dtype=float)
    if np.any(m <= 0):
        return None, None, True
    x = np.log(N)
    y = np.log(m)
    c = (x - x.mean()) / np.sum((x - x.mean()) ** 2)
    slope = float(c @ y)
    half = 1.96 * math.sqrt(float(np.sum(c ** 2 * (s / m) ** 2)))
    return slope, (slope - half, slope + half), False


def _lln_replica(task) -> float:
    (model, nu0, N, T, seed, replica, times, refs, metric, grid) = task
    init = sample_product_initial(model.space, nu0, N, seed, replica)
    traj = run_trajectory(model, init, T, seed, replica, sample_times=times, record=False)
    if metric == "TV":
        return max(tv_distance(np.asarray(c, float) / N, r) for c, r in zip(traj.samples, refs))
    return max(ks_distance(s, grid, r) for s, r in zip(traj.samples, refs))


def lln_convergence_report(model: ModelSpec, nu0, N_list: Sequence[int], replicas: int, T: float,
                           metric: str = "TV", seed: int = 0, n_times: int = 50,
                           dt: float = 1e-3, density_grid: dict | None = None,
                           band: tuple | None = None, workers: int | None = None) -> LlnReport:
    """Empirical rate of convergence of the empirical measure to the limit."""
    N_list = [int(n) for n in N_list]
    if len(N_list) < 3:
        raise ConfigError("lln needs at least 3 values of N")
    if any(b <= a for a, b in zip(N_list, N_list[1:])):
        raise ConfigError("N values must be strictly increasing")
    if replicas < 2:
        raise ConfigError("lln needs at least 2 replicas per N")
    times = np.linspace(0.0, T, n_times)
    grid = None
    if metric == "TV":
        if not model.space.is_finite:
            raise ConfigError("TV metric needs a finite type space")
        lim = solve_limit_finite(model, initial_law_vector(model.space, nu0), T, dt)
        refs = [interpolate_limit(lim, t) for t in times]
    elif metric == "KS":
        if model.space.is_finite:
            raise ConfigError("KS metric needs a real type space")
        if density_grid is None or nu0.get("kind") != "normal":
            raise ConfigError("KS metric needs a normal initial law and a density grid block")
        g0 = DensityGrid.gaussian(nu0["mean"], nu0["sd"], density_grid["lo"], density_grid["hi"],
                                  density_grid["dx"], model.lambda_bar)
        lim = solve_percolation_density(g0, T, dt)
        grid = lim.grid
        refs = [interpolate_limit(lim, t) for t in times]
    else:
        raise ConfigError(f"unknown metric {metric!r}")
    tasks = [(model, nu0, N, T, seed, i * replicas + r, times, refs, metric, grid)
             for i, N in enumerate(N_list) for r in range(replicas)]
    errs = np.asarray(replica_map(_lln_replica, tasks, workers)).reshape(len(N_list), replicas)
    mean = errs.mean(axis=1)
    se = errs.std(axis=1, ddof=1) / math.sqrt(replicas)
    slope, ci, degenerate = fit_loglog_slope(N_list, mean, se)
    passed = None
    if band is not None:
        passed = (not degenerate) and band[0] <= slope <= band[1]
    return LlnReport(metric, N_list, int(replicas), mean.tolist(), se.tolist(), slope, ci,
                     degenerate, times.tolist(), tuple(band) if band else None, passed,
                     errs.tolist(),
                     provenance(model, seed=seed, replicas=replicas, T=T, dt=dt,
                                N_list=N_list, n_times=n_times))


# ----------------------------------------------------------------------- CLT

@dataclass
class CltReport:
    N: int
    replicas: int
    T: float
    empirical_cov: list
    predicted_cov: list
    rel_frobenius: float
    tolerance: float
    normality: list
    covariance_passed: bool
    normality_passed: bool
    limit_final: list
    provenance: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.covariance_passed and self.normality_passed

    def to_dict(self) -> dict:
        d = asdict(self)
        d["passed"] = self.passed
        d["description"] = ("covariance of sqrt(N)*(empirical - limit) at T across replicas "
                            "against the covariance equation of the Gaussian limit")
        return d


def _clt_replica(task) -> tuple:
    model, nu0, N, T, seed, replica = task
    init = sample_product_initial(model.space, nu0, N, seed, replica)
    traj = run_trajectory(model, init, T, seed, replica, sample_times=(T,), record=False)
    return traj.samples[-1]


def clt_covariance_check(model: ModelSpec, nu0, N: int, replicas: int, T: float,
                         tolerance: float, seed: int = 0, dt: float = 1e-3,
                         workers: int | None = None) -> tuple[CltReport, np.ndarray]:
    """Compare the replica covariance of the fluctuations at T with the predicted one.

    Returns the report and the fluctuation samples (replicas x types). The
    normality screen runs only with at least 500 replicas; an empty
    ``normality`` list in the report means it was skipped.
    """
    if replicas < MIN_CLT_REPLICAS:
        raise ConfigError(f"clt needs at least {MIN_CLT_REPLICAS} replicas, got {replicas}")
    if not model.space.is_finite:
        raise UnsupportedError("covariance checks need a finite type space")
    require_kernels(model)
    p0 = initial_law_vector(model.space, nu0)
    path = solve_clt_covariance(model, p0, multinomial_covariance(p0), T, dt)
    nuT = path.nu[-1]
    counts = np.asarray(replica_map(_clt_replica,
                                    [(model, nu0, N, T, seed, r) for r in range(replicas)],
                                    workers), dtype=float)
    sigma = math.sqrt(N) * (counts / N - nuT)
    emp = np.cov(sigma, rowvar=False, ddof=1)
    pred = path.final
    rel = float(np.linalg.norm(emp - pred) / np.linalg.norm(pred))
    norm = []
    if replicas >= MIN_NORMALITY_SAMPLES:
        norm = [asdict(normality_check(sigma[:, j])) for j in range(sigma.shape[1])]
    report = CltReport(int(N), int(replicas), float(T), emp.tolist(), pred.tolist(), rel,
                       float(tolerance), norm, rel <= tolerance,
                       all(r["passed"] for r in norm), nuT.tolist(),
                       provenance(model, seed=seed, replicas=replicas, N=N, T=T, dt=dt))
    return report, sigma


def report_json(obj: Any) -> Any:
    """Make numpy scalars and tuples JSON-ready."""
    if isinstance(obj, dict):
        return {str(k): report_json(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [report_json(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return report_json(obj.tolist())
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    return obj
