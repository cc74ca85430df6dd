"""Central-limit objects: fluctuations, the linearized drift, the diffusion matrix,
covariance propagation, the Gaussian limit SDE and martingale residuals."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .engine import Trajectory
from .errors import NotPSDError, SpaceMismatchError, StepSizeError, UnsupportedError
from .limit import LimitTrajectory, interpolate_limit, n_steps, rk4_step
from .measure import TestFunction, pair
from .models import FiniteModel, LinearKernelSpec, ModelSpec, require_kernels
from .rng import generator

PSD_TOL = 1e-8


# --------------------------------------------------------------- fluctuations

@dataclass
class FluctuationSample:
    """``values[n, m]`` is sqrt(N) * <nu^N - nu, phi_m> at ``times[n]``."""

    times: np.ndarray
    values: np.ndarray
    N: int
    replica: int = 0

    def csv_rows(self):
        for t, row in zip(self.times, self.values):
            for m, v in enumerate(row):
                yield self.replica, repr(float(t)), m, repr(float(v))


def write_fluctuations_csv(fh, samples: Sequence[FluctuationSample]) -> None:
    fh.write("# fluctuation field sqrt(N)*(empirical - limit) paired with test functions; "
             "dimensionless; time in model time units\n")
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(("replica", "time", "phi_index", "value"))
    for s in samples:
        w.writerows(s.csv_rows())


def _limit_pairing(limit: LimitTrajectory, t: float, phi: TestFunction, space) -> float:
    state = interpolate_limit(limit, t)
    if limit.grid is None:
        return pair(state, phi, space, probability=True)
    return float(np.trapezoid(phi.values(space, limit.grid) * state, limit.grid))


def extract_fluctuations(traj: Trajectory, limit: LimitTrajectory,
                         family: Sequence[TestFunction], times: Sequence[float],
                         replica: int = 0) -> FluctuationSample:
    """Fluctuations along the right-continuous trajectory at the requested times."""
    if traj.space.is_finite and limit.grid is not None:
        raise SpaceMismatchError("finite trajectory against a density limit")
    if abs(limit.T - traj.T) > 1e-9 * max(1.0, traj.T):
        raise ValueError("trajectory and limit cover different horizons")
    rootN = math.sqrt(traj.N)
    out = np.empty((len(times), len(family)))
    for n, t in enumerate(times):
        if t > traj.T:
            raise ValueError(f"time {t} beyond T={traj.T}")
        emp = traj.measure_at(t)
        for m, phi in enumerate(family):
            if phi.kind == "constant" and limit.grid is not None:
                # both sides are probability measures; quadrature error on the
                # density grid is not a fluctuation
                out[n, m] = 0.0
            else:
                out[n, m] = rootN * (pair(emp, phi) - _limit_pairing(limit, t, phi, traj.space))
    return FluctuationSample(np.asarray(times, dtype=float), out, traj.N, replica)


# ------------------------------------------------------------- drift operator

def _gamma_phi(kernels: LinearKernelSpec, phi: np.ndarray) -> np.ndarray:
    """``[w, z, m]``: mean increment of phi_m for a type-w agent in environment z."""
    G = kernels.gamma_table
    return np.einsum("wzv,vm->wzm", G, phi) - kernels.gamma_mass[:, :, None] * phi[:, None, :]


def _lambda_phi(kernels: LinearKernelSpec, phi: np.ndarray) -> np.ndarray | None:
    """``[w1, w2, z, m]``: mean increment of phi_m(w1') + phi_m(w2') for an ordered pair."""
    L = kernels.lambda_table
    if L is None:
        return None
    gain = np.einsum("abzcd,cm->abzm", L, phi) + np.einsum("abzcd,dm->abzm", L, phi)
    loss = kernels.lambda_mass[:, :, :, None] * (phi[:, None, None, :] + phi[None, :, None, :])
    return gain - loss


def apply_drift_operator(kernels: LinearKernelSpec, nu, phi) -> np.ndarray:
    """Linearized drift applied to test function values ``phi`` (shape (k,) or (k, m)).

    Sums the four contributions: environment slot of the single-agent kernel,
    jumping slot of the single-agent kernel, environment slot of the pair kernel
    and both agent slots of the pair kernel.
    """
    nu = np.asarray(nu, dtype=float)
    phi = np.asarray(phi, dtype=float)
    single = phi.ndim == 1
    P = phi[:, None] if single else phi
    Gp = _gamma_phi(kernels, P)
    out = np.einsum("w,wzm->zm", nu, Gp) + np.einsum("x,zxm->zm", nu, Gp)
    Lp = _lambda_phi(kernels, P)
    if Lp is not None:
        out = out + np.einsum("a,b,abzm->zm", nu, nu, Lp)
        out = out + np.einsum("w,x,zwxm->zm", nu, nu, Lp) + np.einsum("w,x,wzxm->zm", nu, nu, Lp)
    return out[:, 0] if single else out


def drift_matrix_at(kernels: LinearKernelSpec, nu) -> np.ndarray:
    """``A[i, j]``: the drift operator applied to the indicator of type i, evaluated at type j."""
    k = kernels.k
    return apply_drift_operator(kernels, nu, np.eye(k)).T


def diffusion_matrix_at(kernels: LinearKernelSpec | FiniteModel, nu) -> np.ndarray:
    """Instantaneous covariance rate of the fluctuation increments on indicators."""
    nu = np.asarray(nu, dtype=float)
    Ga, Lb = kernels.rate_tables(nu)
    k = nu.size
    W = nu[:, None] * Ga
    G = np.diag(W.sum(axis=0)) + np.diag(W.sum(axis=1)) - W - W.T
    if Lb is not None:
        V = (np.outer(nu, nu)[:, :, None, None] * Lb).reshape(-1)
        idx = np.flatnonzero(V)
        if idx.size:
            w1, w2, a, b = np.unravel_index(idx, (k,) * 4)
            D = np.zeros((idx.size, k))
            np.add.at(D, (np.arange(idx.size), a), 1.0)
            np.add.at(D, (np.arange(idx.size), b), 1.0)
            np.add.at(D, (np.arange(idx.size), w1), -1.0)
            np.add.at(D, (np.arange(idx.size), w2), -1.0)
            G = G + (D * V[idx, None]).T @ D
    return 0.5 * (G + G.T)


@dataclass
class DriftMatrix:
    times: np.ndarray
    A: np.ndarray


@dataclass
class DiffusionMatrix:
    times: np.ndarray
    G: np.ndarray


def _kernels_of(model) -> LinearKernelSpec:
    if isinstance(model, LinearKernelSpec):
        return model
    if isinstance(model, ModelSpec):
        if not model.space.is_finite:
            raise UnsupportedError("matrix forms need a finite type space")
        return require_kernels(model)
    raise TypeError("expected a LinearKernelSpec or ModelSpec")


def build_drift_matrix(model, limit: LimitTrajectory) -> DriftMatrix:
    if limit.grid is not None:
        raise UnsupportedError("drift matrices need a finite type space")
    kern = _kernels_of(model)
    return DriftMatrix(limit.times.copy(), np.stack([drift_matrix_at(kern, v) for v in limit.states]))


def build_diffusion_matrix(model, limit: LimitTrajectory) -> DiffusionMatrix:
    if limit.grid is not None:
        raise UnsupportedError("diffusion matrices need a finite type space")
    kern = _kernels_of(model)
    return DiffusionMatrix(limit.times.copy(),
                           np.stack([diffusion_matrix_at(kern, v) for v in limit.states]))


def percolation_drift(grid: np.ndarray, density: np.ndarray, lam: float,
                      phi: TestFunction, space) -> np.ndarray:
    """Linearized drift of the pooling model on grid points: 4 lam (nu * phi) - 2 lam phi."""
    x = np.asarray(grid, dtype=float)
    g = np.asarray(density, dtype=float)
    shifted = phi.values(space, (x[:, None] + x[None, :]).ravel()).reshape(x.size, x.size)
    conv = np.trapezoid(g[None, :] * shifted, x, axis=1)
    return 4.0 * lam * conv - 2.0 * lam * phi.values(space, x)


def percolation_covariance_rate(grid: np.ndarray, density: np.ndarray, lam: float,
                                phi1: TestFunction, phi2: TestFunction, space) -> float:
    """Covariance rate of fluctuation increments for the pooling model by 2-d quadrature."""
    x = np.asarray(grid, dtype=float)
    g = np.asarray(density, dtype=float)
    s = (x[:, None] + x[None, :]).ravel()

    def jump(phi):
        v = phi.values(space, x)
        return (2.0 * phi.values(space, s).reshape(x.size, x.size) - v[:, None] - v[None, :])

    integrand = g[:, None] * g[None, :] * jump(phi1) * jump(phi2)
    return float(lam * np.trapezoid(np.trapezoid(integrand, x, axis=1), x))


# --------------------------------------------------------- covariance solvers

def psd_sqrt(G) -> np.ndarray:
    """Symmetric square root; eigenvalues in [-1e-8, 0) are clamped to zero."""
    G = np.asarray(G, dtype=float)
    if G.ndim != 2 or G.shape[0] != G.shape[1]:
        raise ValueError("expected a square matrix")
    scale = max(1.0, float(np.abs(G).max())) if G.size else 1.0
    if not np.allclose(G, G.T, atol=1e-12 * scale, rtol=0):
        raise NotPSDError("matrix is not symmetric")
    vals, vecs = np.linalg.eigh(0.5 * (G + G.T))
    if vals.size and vals.min() < -PSD_TOL * scale:
        raise NotPSDError(f"eigenvalue {vals.min():.3e} below -{PSD_TOL}")
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def _as_callable(M) -> Callable[[float], np.ndarray]:
    if callable(M):
        return M
    arr = np.asarray(M, dtype=float)
    return lambda t: arr


def _check_psd(S: np.ndarray, t: float) -> None:
    scale = max(1.0, float(np.abs(S).max()))
    if np.linalg.eigvalsh(S).min() < -PSD_TOL * scale:
        raise StepSizeError(f"covariance lost positive semidefiniteness at t={t:.6g}; reduce dt")


@dataclass
class CovariancePath:
    times: np.ndarray
    Sigma: np.ndarray
    nu: np.ndarray | None = None

    @property
    def final(self) -> np.ndarray:
        return self.Sigma[-1]


def lyapunov_rhs(A: np.ndarray, G: np.ndarray, S: np.ndarray) -> np.ndarray:
    AS = A @ S
    return AS + AS.T + G


def solve_fluctuation_covariance(A, G, Sigma0, T: float, dt: float) -> CovariancePath:
    """RK4 for ``Sigma' = A Sigma + Sigma A^T + G`` with A, G constant or callables of t."""
    Af, Gf = _as_callable(A), _as_callable(G)
    S = np.asarray(Sigma0, dtype=float)
    S = 0.5 * (S + S.T)
    n = n_steps(T, dt)
    out = np.empty((n + 1,) + S.shape)
    out[0] = S
    for s in range(n):
        t = s * dt
        k1 = lyapunov_rhs(Af(t), Gf(t), S)
        k2 = lyapunov_rhs(Af(t + dt / 2), Gf(t + dt / 2), S + 0.5 * dt * k1)
        k3 = lyapunov_rhs(Af(t + dt / 2), Gf(t + dt / 2), S + 0.5 * dt * k2)
        k4 = lyapunov_rhs(Af(t + dt), Gf(t + dt), S + dt * k3)
        S = S + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        S = 0.5 * (S + S.T)
        _check_psd(S, t + dt)
        out[s + 1] = S
    return CovariancePath(dt * np.arange(n + 1), out)


def solve_clt_covariance(model, nu0, Sigma0, T: float, dt: float) -> CovariancePath:
    """Integrate the limit and the Lyapunov equation jointly with one RK4 scheme.

    Evaluating A and G at the stage values of the limit keeps the covariance
    fourth-order accurate, which interpolating a stored limit would not.
    """
    kern = _kernels_of(model)
    k = kern.k
    nu = np.asarray(nu0, dtype=float)
    S = np.asarray(Sigma0, dtype=float)

    def f(y):
        v, Sig = y[:k], y[k:].reshape(k, k)
        return np.concatenate([kern.field(v),
                               lyapunov_rhs(drift_matrix_at(kern, v),
                                            diffusion_matrix_at(kern, v), Sig).ravel()])

    n = n_steps(T, dt)
    y = np.concatenate([nu, S.ravel()])
    nus = np.empty((n + 1, k))
    Ss = np.empty((n + 1, k, k))
    nus[0], Ss[0] = nu, 0.5 * (S + S.T)
    for s in range(n):
        y = rk4_step(f, y, dt)
        Sig = y[k:].reshape(k, k)
        Sig = 0.5 * (Sig + Sig.T)
        _check_psd(Sig, (s + 1) * dt)
        y[k:] = Sig.ravel()
        nus[s + 1], Ss[s + 1] = y[:k], Sig
    return CovariancePath(dt * np.arange(n + 1), Ss, nus)


def multinomial_covariance(nu0) -> np.ndarray:
    """Covariance of sqrt(N)(nu^N_0 - nu0) under i.i.d. initial types."""
    nu0 = np.asarray(nu0, dtype=float)
    return np.diag(nu0) - np.outer(nu0, nu0)


def coefficients_from_limit(model, limit: LimitTrajectory):
    """Callables ``A(t)``, ``G(t)`` from the interpolated limit (exact at nodes)."""
    kern = _kernels_of(model)
    return (lambda t: drift_matrix_at(kern, interpolate_limit(limit, t)),
            lambda t: diffusion_matrix_at(kern, interpolate_limit(limit, t)))


# ------------------------------------------------------------------ limit SDE

@dataclass
class LimitSdePath:
    """``states[n, p, :]`` for path p at ``times[n]`` (or only the final time)."""

    times: np.ndarray
    states: np.ndarray
    seed: int

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]


def simulate_limit_sde(A, G, sigma0, T: float, dt: float, seed: int, paths: int = 1,
                       keep_path: bool = True, replica: int = 0,
                       init_cov=None) -> LimitSdePath:
    """Euler-Maruyama for ``d sigma = A(t) sigma dt + G(t)^(1/2) dB``, vectorized over paths.

    ``sigma0`` is one start vector or one per path; with ``init_cov`` each path
    starts at ``sigma0`` plus an independent N(0, init_cov) draw.
    """
    Af, Gf = _as_callable(A), _as_callable(G)
    gen = generator(seed, replica, "sde")
    x = np.asarray(sigma0, dtype=float)
    if x.ndim == 1:
        x = np.tile(x, (paths, 1))
    if init_cov is not None:
        x = x + gen.standard_normal(x.shape) @ psd_sqrt(init_cov).T
    x0 = x.copy()
    if x.shape[0] != paths:
        raise ValueError("sigma0 rows must match the number of paths")
    n = n_steps(T, dt)
    k = x.shape[1]
    hist = np.empty((n + 1, paths, k)) if keep_path else None
    if keep_path:
        hist[0] = x
    sq = math.sqrt(dt)
    for s in range(n):
        t = s * dt
        S = psd_sqrt(Gf(t))
        x = x + dt * (x @ Af(t).T) + sq * (gen.standard_normal((paths, k)) @ S.T)
        if keep_path:
            hist[s + 1] = x
    times = dt * np.arange(n + 1)
    if not keep_path:
        return LimitSdePath(times[[0, -1]], np.stack([x0, x]), seed)
    return LimitSdePath(times, hist, seed)


# -------------------------------------------------------- martingale residual

@dataclass
class MartingaleResidual:
    """Compensated path of <nu^N, phi> at 0, each event time and T."""

    times: np.ndarray
    values: np.ndarray
    realized_qv: float
    predictable_qv: float
    N: int

    @property
    def final(self) -> float:
        return float(self.values[-1])


def martingale_residual(traj: Trajectory, model: FiniteModel, phi) -> MartingaleResidual:
    """Subtract the exact N-agent drift integrated over the piecewise-constant segments.

    Also returns the realized quadratic variation (sum of squared jumps) and the
    predictable one, ``(1/N) * integral of the jump-size-squared rate``.
    """
    if not isinstance(model, FiniteModel) or not traj.space.is_finite:
        raise UnsupportedError("martingale residuals need a finite-type model")
    phi_v = phi.on_space(traj.space) if isinstance(phi, TestFunction) else np.asarray(phi, float)
    N = traj.N
    k = traj.space.size
    counts = np.bincount(np.asarray(traj.initial, dtype=np.int64), minlength=k)
    cache: dict = {}

    def rates(c):
        key = tuple(c.tolist())
        hit = cache.get(key)
        if hit is None:
            nu = c / N
            hit = (float(phi_v @ model.field(nu, n_agents=N)),
                   model.quadratic_rate(nu, phi_v, phi_v, n_agents=N))
            cache[key] = hit
        return hit

    times = [0.0]
    vals = [0.0]
    x0 = float(phi_v @ counts) / N
    comp = 0.0
    pqv = 0.0
    rqv = 0.0
    t_prev = 0.0
    for t, old, new in zip(traj.times + [traj.T], traj.before + [None], traj.after + [None]):
        drift, qrate = rates(counts)
        comp += drift * (t - t_prev)
        pqv += qrate * (t - t_prev) / N
        t_prev = t
        if old is not None:
            jump = (sum(phi_v[w] for w in new) - sum(phi_v[w] for w in old)) / N
            rqv += jump * jump
            for w in old:
                counts[w] -= 1
            for w in new:
                counts[w] += 1
        times.append(t)
        vals.append(float(phi_v @ counts) / N - x0 - comp)
    return MartingaleResidual(np.asarray(times), np.asarray(vals), rqv, pqv, N)
