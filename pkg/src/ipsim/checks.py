"""Kernel-consistency checks of a model at randomly drawn population states."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import BOUND_SLACK
from .fluctuation import diffusion_matrix_at, drift_matrix_at
from .models import FiniteModel, ModelSpec
from .rng import generator

TOL = 1e-10


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


def _states(k: int, gen, n: int) -> list[np.ndarray]:
    out = [np.full(k, 1.0 / k)] + [np.eye(k)[i] for i in range(k)]
    out += list(gen.dirichlet(np.ones(k), size=n))
    return out


def _finite_checks(model: FiniteModel, gen, n_states: int) -> list[CheckResult]:
    k = model.k
    states = _states(k, gen, n_states)
    res = []
    worst_g = max(model.gamma(w, nu.tolist()) for nu in states for w in range(k))
    res.append(CheckResult("gamma_within_bound", worst_g <= model.gamma_bar * (1 + BOUND_SLACK),
                           f"max gamma {worst_g:.6g} vs bound {model.gamma_bar:.6g}"))
    worst_l = max(model.contact_lam(a, b, nu.tolist())
                  for nu in states for a in range(k) for b in range(k))
    res.append(CheckResult("lambda_within_bound", worst_l <= model.lambda_bar * (1 + BOUND_SLACK),
                           f"max contact rate {worst_l:.6g} vs bound {model.lambda_bar:.6g}"))
    for ch in model.channels:
        N = 101
        ok = all(ch.rate(c) <= ch.bound(N) for c in
                 (gen.multinomial(N, nu) for nu in states))
        res.append(CheckResult(f"channel_{ch.name}_within_bound", ok))
    bad = []
    for nu in states:
        for w in range(k):
            p = np.asarray(model.a_probs(w, nu.tolist()))
            if np.any(p < 0) or p.sum() <= 0:
                bad.append(("a", w))
            for w2 in range(k):
                q = np.asarray(model.b_probs(w, w2, nu.tolist()))
                if np.any(q < 0) or q.sum() <= 0:
                    bad.append(("b", w, w2))
    res.append(CheckResult("kernels_are_probability_weights", not bad, str(bad[:5]) if bad else ""))
    drift = max(abs(model.field(nu).sum()) for nu in states)
    res.append(CheckResult("field_conserves_mass", drift <= TOL, f"max |sum| {drift:.3e}"))
    if model.kernels is not None:
        kern = model.kernels
        cols = max(np.abs(drift_matrix_at(kern, nu).sum(axis=0)).max() for nu in states)
        res.append(CheckResult("drift_matrix_column_sums_zero", cols <= TOL, f"{cols:.3e}"))
        Gs = [diffusion_matrix_at(kern, nu) for nu in states]
        rows = max(np.abs(G.sum(axis=1)).max() for G in Gs)
        eig = min(np.linalg.eigvalsh(G).min() for G in Gs)
        res.append(CheckResult("diffusion_row_sums_zero", rows <= TOL, f"{rows:.3e}"))
        res.append(CheckResult("diffusion_psd", eig >= -TOL, f"min eigenvalue {eig:.3e}"))
    return res


def _real_checks(model: ModelSpec, gen, n_states: int) -> list[CheckResult]:
    pts = gen.normal(0.0, 5.0, size=(n_states, 2))
    g = max(model.gamma(x, None) for x, _ in pts)
    lam = max(model.contact_lam(x, y, None) for x, y in pts)
    return [CheckResult("gamma_within_bound", g <= model.gamma_bar * (1 + BOUND_SLACK) or g == 0,
                        f"max gamma {g:.6g}"),
            CheckResult("lambda_within_bound", lam <= model.lambda_bar * (1 + BOUND_SLACK),
                        f"max rate {lam:.6g} vs bound {model.lambda_bar:.6g}")]


def validate_model(model: ModelSpec, seed: int = 0, n_states: int = 20) -> list[CheckResult]:
    gen = generator(seed, 0, "check")
    if isinstance(model, FiniteModel):
        return _finite_checks(model, gen, n_states)
    return _real_checks(model, gen, n_states)
