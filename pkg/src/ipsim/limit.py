"""Deterministic mean-field limits: finite-type ODE system and the pooling density equation."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, MassLeakageError, StepSizeError, UnsupportedError
from .models import FiniteModel, LinearKernelSpec, ModelSpec

NEG_TOL = 1e-10


def n_steps(T: float, dt: float) -> int:
    """Number of fixed steps covering ``[0, T]``; ``T/dt`` must be an integer."""
    if not dt > 0:
        raise ConfigError("dt must be > 0")
    if T < 0:
        raise ConfigError("T must be >= 0")
    n = int(round(T / dt))
    if abs(n * dt - T) > 1e-9 * max(1.0, T):
        raise ConfigError(f"T={T} is not a multiple of dt={dt}")
    return n


@dataclass
class LimitTrajectory:
    """States of the limit on a uniform time grid.

    ``states[n]`` is a probability vector (finite types) or density values on
    ``grid`` (real line).
    """

    times: np.ndarray
    states: np.ndarray
    dt: float
    labels: tuple = ()
    grid: np.ndarray | None = None
    leakage: float = 0.0
    notes: list = field(default_factory=list)

    @property
    def T(self) -> float:
        return float(self.times[-1])

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    def masses(self) -> np.ndarray:
        if self.grid is None:
            return self.states.sum(axis=1)
        return np.trapezoid(self.states, self.grid, axis=1)

    def means(self) -> np.ndarray:
        """First moment of each density state (real-line limits only)."""
        if self.grid is None:
            raise UnsupportedError("means are defined for density limits")
        return np.trapezoid(self.states * self.grid, self.grid, axis=1)

    def to_csv(self, fh) -> None:
        dens = self.grid is not None
        fh.write("# deterministic limit; time in model time units; "
                 + ("value is a probability density per unit type\n" if dens
                    else "value is the probability mass of the type\n"))
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("time", "bin" if dens else "type", "density" if dens else "mass"))
        points = self.grid if dens else self.labels
        for t, row in zip(self.times, self.states):
            for p, v in zip(points, row):
                w.writerow((repr(float(t)), repr(float(p)) if dens else p, repr(float(v))))


def interpolate_limit(traj: LimitTrajectory, t: float) -> np.ndarray:
    """Linear interpolation in time; exact at grid nodes."""
    times = traj.times
    if t < times[0] or t > times[-1] + 1e-12 * max(1.0, times[-1]):
        raise ValueError(f"time {t} outside [{times[0]}, {times[-1]}]")
    n = int(np.searchsorted(times, t, side="right")) - 1
    n = min(max(n, 0), len(times) - 1)
    if times[n] == t or n == len(times) - 1:
        return traj.states[n].copy()
    s = (t - times[n]) / (times[n + 1] - times[n])
    return (1.0 - s) * traj.states[n] + s * traj.states[n + 1]


def _finite_field(model):
    if isinstance(model, LinearKernelSpec):
        return model.field, model.labels, None
    if isinstance(model, FiniteModel):
        return model.field, model.space.labels, getattr(model, "switching", None)
    if isinstance(model, ModelSpec):
        raise UnsupportedError(f"model {model.name!r} is not on a finite type space")
    raise TypeError("expected a LinearKernelSpec or a finite ModelSpec")


def rk4_step(f, y: np.ndarray, h: float) -> np.ndarray:
    k1 = f(y)
    k2 = f(y + 0.5 * h * k1)
    k3 = f(y + 0.5 * h * k2)
    k4 = f(y + h * k3)
    return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _project(y: np.ndarray, step: int) -> np.ndarray:
    lo = y.min()
    if lo < -NEG_TOL:
        raise StepSizeError(f"entry {lo:.3e} < -{NEG_TOL} after step {step}; reduce dt")
    if lo < 0:
        y = np.maximum(y, 0.0)
        y = y / y.sum()
    return y


def solve_limit_finite(model, nu0, T: float, dt: float) -> LimitTrajectory:
    """Fixed-step RK4 for the finite-type limit system started at ``nu0``."""
    f, labels, switching = _finite_field(model)
    y = np.asarray(nu0, dtype=float)
    if y.shape != (len(labels),):
        raise ConfigError(f"initial law has shape {y.shape}, expected ({len(labels)},)")
    if np.any(y < 0) or abs(y.sum() - 1.0) > 1e-9:
        raise ConfigError("initial law must be a probability vector")
    n = n_steps(T, dt)
    states = np.empty((n + 1, y.size))
    states[0] = y
    notes = []
    for s in range(n):
        y = _project(rk4_step(f, y, dt), s + 1)
        states[s + 1] = y
    if switching is not None:
        sw = np.array([switching(v) for v in states])
        flips = np.flatnonzero(np.sign(sw[1:]) * np.sign(sw[:-1]) < 0)
        if flips.size:
            notes.append(f"field is non-smooth: switching surface crossed near "
                         f"t={[float(dt * (i + 1)) for i in flips]}")
    return LimitTrajectory(dt * np.arange(n + 1), states, float(dt), tuple(labels), notes=notes)


# ------------------------------------------------------------ density equation

@dataclass
class DensityGrid:
    """Density samples on the uniform grid ``linspace(lo, hi, n_bins)``."""

    lo: float
    hi: float
    n_bins: int
    values: np.ndarray
    lam: float

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.n_bins,):
            raise ConfigError("density values do not match n_bins")
        if not self.hi > self.lo or self.n_bins < 3:
            raise ConfigError("grid needs hi > lo and at least 3 bins")
        if np.any(self.values < 0):
            raise ConfigError("density must be >= 0")
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        mass = np.trapezoid(self.values, self.x)
        if abs(mass - 1.0) > 1e-6:
            raise ConfigError(f"density integrates to {mass:.9f}, not 1")

    @property
    def x(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.n_bins)

    @property
    def dx(self) -> float:
        return (self.hi - self.lo) / (self.n_bins - 1)

    @classmethod
    def gaussian(cls, mean: float, sd: float, lo: float, hi: float, dx: float,
                 lam: float) -> "DensityGrid":
        n = int(round((hi - lo) / dx)) + 1
        x = np.linspace(lo, hi, n)
        g = np.exp(-0.5 * ((x - mean) / sd) ** 2) / (sd * np.sqrt(2 * np.pi))
        g /= np.trapezoid(g, x)
        return cls(lo, hi, n, g, lam)


def self_convolution(g: np.ndarray, dx: float, offset: int, method: str = "direct") -> np.ndarray:
    """``(g*g)(x_k)`` on the grid; ``offset`` is the index of the node at 0."""
    if method == "direct":
        full = np.convolve(g, g)
    elif method == "fft":
        from scipy.signal import fftconvolve
        full = fftconvolve(g, g)
    else:
        raise ConfigError(f"unknown convolution method {method!r}")
    n = g.size
    return dx * full[offset:offset + n]


def solve_percolation_density(g0: DensityGrid, T: float, dt: float,
                              leakage_bound: float = 1e-3,
                              method: str = "direct") -> LimitTrajectory:
    """RK4 for ``g' = -2 lam g + 2 lam (g*g)`` with convolution truncated to the grid."""
    dx = g0.dx
    offset = -g0.lo / dx
    if g0.lo > 0 or g0.hi < 0 or abs(offset - round(offset)) > 1e-9:
        raise ConfigError("grid must contain 0 as a node (lo <= 0 <= hi, -lo/dx integral)")
    offset = int(round(offset))
    lam = g0.lam

    def f(g):
        return 2.0 * lam * (self_convolution(g, dx, offset, method) - g)

    n = n_steps(T, dt)
    x = g0.x
    states = np.empty((n + 1, g0.n_bins))
    g = g0.values.copy()
    states[0] = g
    for s in range(n):
        if lam > 0:
            g = rk4_step(f, g, dt)
        states[s + 1] = g
    leak = abs(1.0 - float(np.trapezoid(g, x)))
    if leak > leakage_bound:
        raise MassLeakageError(f"mass leakage {leak:.3e} exceeds {leakage_bound:.1e}; "
                               "widen the grid")
    return LimitTrajectory(dt * np.arange(n + 1), states, float(dt), grid=x, leakage=leak)
