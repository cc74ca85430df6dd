"""Model definitions: jump rates, jump kernels and the built-in examples.

A model supplies the individual change rate ``gamma(w, nu)`` with its kernel
``a(w, nu, .)`` and the pair contact rate ``lam(w1, w2, nu)`` with its kernel
``b(w1, w2, nu, .)``.  Kernels are sampled from a single uniform variate so
that a simulation is a deterministic function of its uniform stream.

On finite type spaces ``nu`` is a probability vector indexed by label (any
indexable sequence of floats); on the real line the built-in model ignores it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from operator import mul
from typing import Any, Sequence

import numpy as np

from .errors import ConfigError, UnsupportedError
from .measure import TypeSpace

TOL_STOCHASTIC = 1e-12


def pick(weights: Sequence[float], u: float) -> int:
    """Inverse-CDF draw from unnormalized nonnegative ``weights``."""
    total = 0.0
    for w in weights:
        total += w
    target = u * total
    acc = 0.0
    last = 0
    for idx, w in enumerate(weights):
        if w > 0.0:
            acc += w
            last = idx
            if target < acc:
                return idx
    return last


@dataclass(frozen=True, eq=False)
class DiscreteKernel:
    """Finite measure on a finite outcome set, sampled by inverse CDF."""

    outcomes: tuple
    weights: np.ndarray

    @property
    def mass(self) -> float:
        return float(np.sum(self.weights))

    def probabilities(self) -> np.ndarray:
        m = self.mass
        if m <= 0:
            raise ValueError("kernel has zero mass")
        return self.weights / m

    def sample(self, u: float):
        return self.outcomes[pick(self.weights.tolist(), u)]


@dataclass(frozen=True)
class MatchingChannel:
    """Aggregate Poisson clock pairing one agent of each source type.

    The global rate is ``coef * min(count[s1], count[s2])``; on an event one
    agent of each source type is drawn uniformly and moved to ``target``.
    """

    name: str
    coef: float
    source: tuple[int, int]
    target: tuple[int, int]

    def rate(self, counts: Sequence[int]) -> float:
        return self.coef * min(counts[self.source[0]], counts[self.source[1]])

    def bound(self, n_agents: int) -> float:
        return self.coef * (n_agents // 2)


class ModelSpec:
    """Base class for rate/kernel models.

    ``lam`` is the full contact rate entering the limit equations.  The engine
    thins ordered pairs with ``contact_lam`` and realizes the remainder of
    ``lam`` through ``channels``; for most models the two coincide.
    """

    name = "model"
    space: TypeSpace
    gamma_bar: float = 0.0
    lambda_bar: float = 0.0
    channels: tuple = ()
    kernels: "LinearKernelSpec | None" = None
    params: dict

    def gamma(self, w, nu) -> float:
        raise NotImplementedError

    def sample_a(self, w, nu, u: float):
        raise NotImplementedError

    def lam(self, w1, w2, nu) -> float:
        raise NotImplementedError

    def contact_lam(self, w1, w2, nu) -> float:
        return self.lam(w1, w2, nu)

    def sample_b(self, w1, w2, nu, u: float):
        raise NotImplementedError

    def channel_bound(self, n_agents: int) -> float:
        return sum(c.bound(n_agents) for c in self.channels)

    def provenance(self) -> dict:
        return {"name": self.name, **self.params}


def _pair_weights(nu: np.ndarray, n_agents: int | None) -> np.ndarray:
    w = np.outer(nu, nu)
    if n_agents is not None:
        # self-pairs never interact in the particle system
        w -= np.diag(nu) / n_agents
    return w


def field_from_rates(nu: np.ndarray, Ga: np.ndarray, Lb: np.ndarray | None,
                     n_agents: int | None = None) -> np.ndarray:
    """Right side of the finite-type limit system at ``nu``.

    ``Ga[w, w']`` is the rate for a type-``w`` agent to become ``w'``;
    ``Lb[w1, w2, w1', w2']`` the rate for an ordered pair to become
    ``(w1', w2')``.  With ``n_agents`` the pair term excludes self-pairs, giving
    the exact drift of the N-agent system.
    """
    nu = np.asarray(nu, dtype=float)
    out = nu @ Ga - nu * Ga.sum(axis=1)
    if Lb is not None:
        M = _pair_weights(nu, n_agents)[:, :, None, None] * Lb
        out = out + M.sum(axis=(0, 1, 3)) + M.sum(axis=(0, 1, 2))
        out = out - M.sum(axis=(1, 2, 3)) - M.sum(axis=(0, 2, 3))
    return out


def quadratic_rate_from_rates(nu: np.ndarray, Ga: np.ndarray, Lb: np.ndarray | None,
                              phi1: np.ndarray, phi2: np.ndarray,
                              n_agents: int | None = None) -> float:
    """Jump-size-squared rate: integrand of the predictable covariation (times N)."""
    nu = np.asarray(nu, dtype=float)
    d1 = phi1[None, :] - phi1[:, None]
    d2 = phi2[None, :] - phi2[:, None]
    total = float(np.sum(nu[:, None] * Ga * d1 * d2))
    if Lb is not None:
        D1 = (phi1[None, None, :, None] + phi1[None, None, None, :]
              - phi1[:, None, None, None] - phi1[None, :, None, None])
        D2 = (phi2[None, None, :, None] + phi2[None, None, None, :]
              - phi2[:, None, None, None] - phi2[None, :, None, None])
        W = _pair_weights(nu, n_agents)
        total += float(np.sum(W[:, :, None, None] * Lb * D1 * D2))
    return total


class FiniteModel(ModelSpec):
    """Model on a finite label space with tabulated kernels."""

    def a_probs(self, w: int, nu) -> Sequence[float]:
        raise NotImplementedError

    def b_probs(self, w1: int, w2: int, nu) -> Sequence[float]:
        """Flattened ``k*k`` weights over ordered outcome pairs."""
        raise NotImplementedError

    @property
    def k(self) -> int:
        return self.space.size

    def sample_a(self, w, nu, u):
        return pick(self.a_probs(w, nu), u)

    def sample_b(self, w1, w2, nu, u):
        return divmod(pick(self.b_probs(w1, w2, nu), u), self.k)

    def rate_tables(self, nu) -> tuple[np.ndarray, np.ndarray | None]:
        """``(Ga, Lb)``: gamma*a as a k x k matrix and lam*b as a k^4 tensor."""
        k = self.k
        Ga = np.zeros((k, k))
        for w in range(k):
            g = self.gamma(w, nu)
            if g > 0:
                p = np.asarray(self.a_probs(w, nu), dtype=float)
                Ga[w] = g * p / p.sum()
        Lb = np.zeros((k, k, k, k))
        any_pair = False
        for w1 in range(k):
            for w2 in range(k):
                lv = self.lam(w1, w2, nu)
                if lv > 0:
                    p = np.asarray(self.b_probs(w1, w2, nu), dtype=float)
                    Lb[w1, w2] = (lv * p / p.sum()).reshape(k, k)
                    any_pair = True
        return Ga, (Lb if any_pair else None)

    def field(self, nu, n_agents: int | None = None) -> np.ndarray:
        Ga, Lb = self.rate_tables(nu)
        return field_from_rates(nu, Ga, Lb, n_agents)

    def quadratic_rate(self, nu, phi1, phi2, n_agents: int | None = None) -> float:
        Ga, Lb = self.rate_tables(nu)
        return quadratic_rate_from_rates(nu, Ga, Lb, np.asarray(phi1, float),
                                         np.asarray(phi2, float), n_agents)


@dataclass(frozen=True, eq=False)
class LinearKernelSpec:
    """Rates that are linear in the population measure.

    ``gamma_table[w, z, w']`` is the mass a type-``z`` agent contributes to the
    rate of a type-``w`` agent jumping to ``w'``; ``lambda_table[w1, w2, z, w1',
    w2']`` is the analogous pair quantity.  Averaging over ``z ~ nu`` gives
    ``gamma * a`` and ``lam * b``.
    """

    labels: tuple
    gamma_table: np.ndarray
    lambda_table: np.ndarray | None = None

    def __post_init__(self):
        k = len(self.labels)
        G = np.asarray(self.gamma_table, dtype=float)
        if G.shape != (k, k, k):
            raise ConfigError(f"Gamma table must have shape {(k, k, k)}, got {G.shape}")
        if not np.all(np.isfinite(G)) or np.any(G < 0):
            raise ConfigError("Gamma table entries must be finite and >= 0")
        object.__setattr__(self, "gamma_table", G)
        if self.lambda_table is not None:
            L = np.asarray(self.lambda_table, dtype=float)
            if L.shape != (k,) * 5:
                raise ConfigError(f"Lambda table must have shape {(k,) * 5}, got {L.shape}")
            if not np.all(np.isfinite(L)) or np.any(L < 0):
                raise ConfigError("Lambda table entries must be finite and >= 0")
            if not np.any(L > 0):
                L = None
            object.__setattr__(self, "lambda_table", L)

    @property
    def k(self) -> int:
        return len(self.labels)

    @property
    def gamma_mass(self) -> np.ndarray:
        return self.gamma_table.sum(axis=2)

    @property
    def lambda_mass(self) -> np.ndarray:
        if self.lambda_table is None:
            return np.zeros((self.k,) * 3)
        return self.lambda_table.sum(axis=(3, 4))

    def gamma_kernel(self, w: int, z: int) -> DiscreteKernel:
        return DiscreteKernel(tuple(range(self.k)), self.gamma_table[w, z].copy())

    def lambda_kernel(self, w1: int, w2: int, z: int) -> DiscreteKernel:
        k = self.k
        outcomes = tuple((a, b) for a in range(k) for b in range(k))
        weights = (np.zeros(k * k) if self.lambda_table is None
                   else self.lambda_table[w1, w2, z].reshape(-1).copy())
        return DiscreteKernel(outcomes, weights)

    def rate_tables(self, nu) -> tuple[np.ndarray, np.ndarray | None]:
        nu = np.asarray(nu, dtype=float)
        Ga = np.einsum("z,wzv->wv", nu, self.gamma_table)
        Lb = None
        if self.lambda_table is not None:
            Lb = np.einsum("z,abzcd->abcd", nu, self.lambda_table)
        return Ga, Lb

    def field(self, nu, n_agents: int | None = None) -> np.ndarray:
        Ga, Lb = self.rate_tables(nu)
        return field_from_rates(nu, Ga, Lb, n_agents)


class LinearKernelModel(FiniteModel):
    """Finite model defined entirely by Gamma/Lambda tables."""

    def __init__(self, kernels: LinearKernelSpec, name: str = "custom",
                 params: dict | None = None):
        self.kernels = kernels
        self.space = TypeSpace.finite(kernels.labels)
        self.name = name
        self.params = dict(params or {})
        self.gamma_bar = float(kernels.gamma_mass.max())
        self.lambda_bar = float(kernels.lambda_mass.max())
        self.channels = ()
        k = kernels.k
        # nested lists: the engine evaluates these one agent at a time
        self._gm = kernels.gamma_mass.tolist()
        self._G = kernels.gamma_table.tolist()
        self._lm = kernels.lambda_mass.tolist()
        self._L = (None if kernels.lambda_table is None
                   else kernels.lambda_table.reshape(k, k, k, k * k).tolist())

    def gamma(self, w, nu):
        return sum(map(mul, self._gm[w], nu))

    def a_probs(self, w, nu):
        rows = self._G[w]
        k = self.k
        out = [0.0] * k
        for z in range(k):
            nz = nu[z]
            if nz > 0.0:
                row = rows[z]
                for v in range(k):
                    out[v] += nz * row[v]
        if sum(out) <= 0.0:
            out[w] = 1.0
        return out

    def lam(self, w1, w2, nu):
        return sum(map(mul, self._lm[w1][w2], nu))

    def b_probs(self, w1, w2, nu):
        k = self.k
        out = [0.0] * (k * k)
        if self._L is not None:
            rows = self._L[w1][w2]
            for z in range(k):
                nz = nu[z]
                if nz > 0.0:
                    row = rows[z]
                    for v in range(k * k):
                        out[v] += nz * row[v]
        if sum(out) <= 0.0:
            out[w1 * k + w2] = 1.0
        return out

    def rate_tables(self, nu):
        return self.kernels.rate_tables(nu)


# ---------------------------------------------------------------- built-ins

OTC_LABELS = ("ho", "hn", "lo", "ln")
HO, HN, LO, LN = range(4)


class OTCModel(FiniteModel):
    """Four-type over-the-counter market with searching and marketmakers."""

    name = "otc"

    def __init__(self, lambda_u: float, lambda_d: float, beta: float, rho: float):
        for key, v in (("lambda_u", lambda_u), ("lambda_d", lambda_d),
                       ("beta", beta), ("rho", rho)):
            if not v >= 0:
                raise ConfigError(f"{key} must be >= 0, got {v}")
        self.lambda_u, self.lambda_d = float(lambda_u), float(lambda_d)
        self.beta, self.rho = float(beta), float(rho)
        self.params = {"lambda_u": self.lambda_u, "lambda_d": self.lambda_d,
                       "beta": self.beta, "rho": self.rho}
        self.space = TypeSpace.finite(OTC_LABELS)
        self.gamma_bar = max(self.lambda_u, self.lambda_d)
        self.lambda_bar = self.beta
        self.channels = ()
        if self.rho > 0:
            self.channels = (MatchingChannel("marketmaker", self.rho, (HN, LO), (HO, LN)),)
        self._gamma = (self.lambda_d, self.lambda_d, self.lambda_u, self.lambda_u)
        self._a = (LO, LN, HO, HN)
        self.kernels = self._linear_kernels() if self.rho == 0 else None

    def _linear_kernels(self) -> LinearKernelSpec:
        G = np.zeros((4, 4, 4))
        L = np.zeros((4,) * 5)
        for w in range(4):
            G[w, :, self._a[w]] = self._gamma[w]
        L[HN, LO, :, HO, LN] = self.beta
        L[LO, HN, :, LN, HO] = self.beta
        return LinearKernelSpec(OTC_LABELS, G, L)

    def switching(self, nu) -> float:
        """Sign changes mark where the min() in the marketmaker rate switches branch."""
        return float(nu[HN] - nu[LO]) if self.rho > 0 else 1.0

    def gamma(self, w, nu):
        return self._gamma[w]

    def a_probs(self, w, nu):
        out = [0.0] * 4
        out[self._a[w]] = 1.0
        return out

    def sample_a(self, w, nu, u):
        return self._a[w]

    def lam(self, w1, w2, nu):
        if (w1, w2) in ((HN, LO), (LO, HN)):
            prod = nu[HN] * nu[LO]
            if prod > 0:
                return self.beta + 0.5 * self.rho * min(nu[HN], nu[LO]) / prod
            return self.beta
        return 0.0

    def contact_lam(self, w1, w2, nu):
        if (w1, w2) in ((HN, LO), (LO, HN)):
            return self.beta
        return 0.0

    def b_probs(self, w1, w2, nu):
        out = [0.0] * 16
        if (w1, w2) == (HN, LO):
            out[HO * 4 + LN] = 1.0
        elif (w1, w2) == (LO, HN):
            out[LN * 4 + HO] = 1.0
        else:
            out[w1 * 4 + w2] = 1.0
        return out

    def sample_b(self, w1, w2, nu, u):
        if (w1, w2) == (HN, LO):
            return HO, LN
        if (w1, w2) == (LO, HN):
            return LN, HO
        return w1, w2


def otc_model(lambda_u: float, lambda_d: float, beta: float, rho: float) -> OTCModel:
    return OTCModel(lambda_u, lambda_d, beta, rho)


class InfoPercolationModel(ModelSpec):
    """Agents on the real line pooling their statistics when they meet."""

    name = "info_percolation"

    def __init__(self, lam: float, bound: float = 1e3):
        if not lam > 0:
            raise ConfigError(f"lambda must be > 0, got {lam}")
        self.rate = float(lam)
        self.params = {"lambda": self.rate}
        self.space = TypeSpace.real(bound)
        self.gamma_bar = 0.0
        self.lambda_bar = self.rate
        self.channels = ()
        self.kernels = None

    def gamma(self, w, nu):
        return 0.0

    def sample_a(self, w, nu, u):
        return w

    def lam(self, w1, w2, nu):
        return self.rate

    def sample_b(self, w1, w2, nu, u):
        s = w1 + w2
        return s, s


def info_percolation_model(lam: float) -> InfoPercolationModel:
    return InfoPercolationModel(lam)


def _check_stochastic(M: np.ndarray, name: str) -> None:
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ConfigError(f"{name} must be a square matrix")
    if np.any(M < 0) or not np.all(np.isfinite(M)):
        raise ConfigError(f"{name} entries must be finite and >= 0")
    if np.any(np.abs(np.diag(M)) > 0):
        raise ConfigError(f"{name} must have a zero diagonal")
    bad = np.flatnonzero(np.abs(M.sum(axis=1) - 1.0) > TOL_STOCHASTIC)
    if bad.size:
        raise ConfigError(f"{name} rows {bad.tolist()} do not sum to 1")


def opinion_model(alpha: float, beta: float, P, Q, m: int) -> LinearKernelModel:
    """Opinions on {-m..m}: crowding-driven moves (P) and popularity-driven moves (Q)."""
    if not alpha >= 0 or not beta >= 0:
        raise ConfigError("alpha and beta must be >= 0")
    P = np.asarray(P, dtype=float)
    Q = np.asarray(Q, dtype=float)
    if int(m) < 1:
        raise ConfigError("m must be >= 1")
    k = 2 * int(m) + 1
    for M, name in ((P, "P"), (Q, "Q")):
        if M.shape != (k, k):
            raise ConfigError(f"{name} must be {k}x{k} for m={m}")
        _check_stochastic(M, name)
    G = np.zeros((k, k, k))
    for i in range(k):
        for j in range(k):
            if i != j:
                G[i, i, j] += alpha * P[i, j]
                G[i, j, j] += beta * Q[i, j]
    labels = tuple(str(v) for v in range(-m, m + 1))
    model = LinearKernelModel(LinearKernelSpec(labels, G), name="opinion",
                              params={"alpha": float(alpha), "beta": float(beta),
                                      "P": P.tolist(), "Q": Q.tolist(), "m": int(m)})
    model.P, model.Q, model.alpha, model.beta = P, Q, float(alpha), float(beta)
    return model


def fleming_viot_model(Q, exit_cap: float = 1e6) -> LinearKernelModel:
    """Fleming-Viot particles on {1..K}; ``Q`` is indexed by {0, 1..K}, 0 absorbing.

    The diagonal of ``Q`` may be given (it must then equal minus the off-diagonal
    row sums) or left at zero.
    """
    Q = np.asarray(Q, dtype=float)
    if Q.ndim != 2 or Q.shape[0] != Q.shape[1] or Q.shape[0] < 2:
        raise ConfigError("Q must be a square matrix over {0, 1..K} with K >= 1")
    off = Q - np.diag(np.diag(Q))
    if np.any(off < 0) or not np.all(np.isfinite(Q)):
        raise ConfigError("off-diagonal rates must be finite and >= 0")
    if np.any(off[0] > 0):
        raise ConfigError("state 0 must be absorbing")
    exits = off.sum(axis=1)
    diag = np.diag(Q)
    given = diag != 0
    if np.any(np.abs(diag[given] + exits[given]) > 1e-9 * np.maximum(1.0, exits[given])):
        raise ConfigError("Q is not conservative: diagonal must be minus the row's exit rate")
    if exits.max() > exit_cap:
        raise ConfigError(f"exit rate {exits.max()} exceeds cap {exit_cap}")
    q = off - np.diag(exits)
    K = Q.shape[0] - 1
    G = np.zeros((K, K, K))
    for i in range(1, K + 1):
        for j in range(1, K + 1):
            if i == j:
                continue
            G[i - 1, :, j - 1] = q[i, j]
            G[i - 1, j - 1, j - 1] += q[i, 0]
    labels = tuple(str(v) for v in range(1, K + 1))
    model = LinearKernelModel(LinearKernelSpec(labels, G), name="fleming_viot",
                              params={"Q": q.tolist(), "K": K, "exit_cap": exit_cap})
    model.q = q
    return model


def two_state_model(up: float, down: float) -> LinearKernelModel:
    """Independent flips: state 1 -> 2 at rate ``up``, 2 -> 1 at rate ``down``."""
    if not up >= 0 or not down >= 0:
        raise ConfigError("rates must be >= 0")
    G = np.zeros((2, 2, 2))
    G[0, :, 1] = up
    G[1, :, 0] = down
    return LinearKernelModel(LinearKernelSpec(("1", "2"), G), name="two_state",
                             params={"up": float(up), "down": float(down)})


def custom_model(labels: Sequence[Any], gamma_table, lambda_table=None) -> LinearKernelModel:
    spec = LinearKernelSpec(tuple(str(x) for x in labels), np.asarray(gamma_table, float),
                            None if lambda_table is None else np.asarray(lambda_table, float))
    return LinearKernelModel(spec, name="custom",
                             params={"labels": list(spec.labels),
                                     "Gamma": spec.gamma_table.tolist(),
                                     "Lambda": (None if lambda_table is None
                                                else np.asarray(lambda_table, float).tolist())})


def zero_model(labels: Sequence[Any]) -> LinearKernelModel:
    k = len(labels)
    return LinearKernelModel(LinearKernelSpec(tuple(str(x) for x in labels), np.zeros((k, k, k))),
                             name="zero", params={"labels": [str(x) for x in labels]})


def require_kernels(model: ModelSpec) -> LinearKernelSpec:
    if model.kernels is None:
        raise UnsupportedError(f"model {model.name!r} has no linear kernel representation")
    return model.kernels


BUILTINS: dict[str, Any] = {
    "otc": otc_model,
    "info_percolation": info_percolation_model,
    "opinion": opinion_model,
    "fleming_viot": fleming_viot_model,
    "two_state": two_state_model,
    "custom": custom_model,
    "zero": zero_model,
}


def build_model(name: str, params: dict) -> ModelSpec:
    """Construct a built-in model from its config block."""
    try:
        factory = BUILTINS[name]
    except KeyError:
        raise ConfigError(f"unknown model {name!r}") from None
    if name == "info_percolation":
        return factory(params["lambda"])
    if name == "custom":
        return factory(params["labels"], params["Gamma"], params.get("Lambda"))
    if name == "opinion":
        return factory(params["alpha"], params["beta"], params["P"], params["Q"], params["m"])
    if name == "fleming_viot":
        return factory(params["Q"], params.get("exit_cap", 1e6))
    if name == "zero":
        return factory(params["labels"])
    return factory(**params)
