"""Exact event-driven simulation of the N-agent jump process by thinning.

Candidates arrive at the constant total rate ``N*gamma_bar + N*lambda_bar``
plus the bounds of any aggregate channels.  A type-change candidate picks an
agent uniformly and is accepted with probability ``gamma/gamma_bar``; a pair
candidate picks an ordered pair uniformly from ``I_N x I_N`` and is accepted
with probability ``lam/lambda_bar``.  Self-pairs ``(i, i)`` are proposed but
never change anything.

Also provides the discrete-time generator scheme used as a test oracle.
"""

from __future__ import annotations

import csv
import hashlib
import io
import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .errors import BoundViolation, ConfigError, StepSizeError, UnsupportedError, ZeroRateError
from .measure import REAL, AgentConfiguration, EmpiricalMeasure, TypeSpace, empirical_measure
from .models import FiniteModel, ModelSpec
from .rng import UniformStream, generator

TYPE_CHANGE, PAIR, CHANNEL = 0, 1, 2
KIND_NAMES = ("TypeChange", "PairInteraction", "MarketmakerChannel")
BOUND_SLACK = 1e-12


def _over(rate: float, bound: float) -> bool:
    return rate > bound * (1.0 + BOUND_SLACK) + 1e-300


@dataclass
class EngineState:
    """Mutable simulation state; ``counts``/``nu`` exist on finite spaces only."""

    time: float
    types: list
    space: TypeSpace
    stream: UniformStream
    counts: list | None = None
    nu: list | None = None
    event_count: int = 0
    candidate_count: int = 0

    @property
    def N(self) -> int:
        return len(self.types)

    def measure(self) -> EmpiricalMeasure:
        if self.counts is not None:
            return EmpiricalMeasure(self.space, self.N, tuple(self.counts))
        return empirical_measure(self.configuration())

    def configuration(self) -> AgentConfiguration:
        return AgentConfiguration(self.space, tuple(self.types))


@dataclass
class Trajectory:
    """Piecewise-constant path: initial state plus the log of effective events."""

    space: TypeSpace
    N: int
    T: float
    initial: tuple
    times: list = field(default_factory=list)
    kinds: list = field(default_factory=list)
    agents: list = field(default_factory=list)
    before: list = field(default_factory=list)
    after: list = field(default_factory=list)
    final: tuple = ()
    sample_times: tuple = ()
    samples: list = field(default_factory=list)
    event_count: int = 0
    candidate_count: int = 0
    kind_names: tuple = KIND_NAMES
    seed: Any = None

    @property
    def n_events(self) -> int:
        return len(self.times)

    def initial_measure(self) -> EmpiricalMeasure:
        return empirical_measure(AgentConfiguration(self.space, self.initial))

    def final_measure(self) -> EmpiricalMeasure:
        return empirical_measure(AgentConfiguration(self.space, self.final))

    def configuration_at(self, t: float) -> AgentConfiguration:
        """Right-continuous configuration at time ``t`` by replaying events."""
        if t < 0 or t > self.T:
            raise ValueError(f"time {t} outside [0, {self.T}]")
        types = list(self.initial)
        for s, ag, new in zip(self.times, self.agents, self.after):
            if s > t:
                break
            for i, w in zip(ag, new):
                types[i] = w
        return AgentConfiguration(self.space, tuple(types))

    def measure_at(self, t: float) -> EmpiricalMeasure:
        return empirical_measure(self.configuration_at(t))

    def counts_path(self) -> np.ndarray:
        """Counts after each event, row 0 being the initial counts (finite spaces)."""
        if not self.space.is_finite:
            raise UnsupportedError("count paths need a finite type space")
        k = self.space.size
        out = np.empty((self.n_events + 1, k), dtype=np.int64)
        c = np.bincount(np.asarray(self.initial, dtype=np.int64), minlength=k)
        out[0] = c
        for n, (old, new) in enumerate(zip(self.before, self.after), start=1):
            for w in old:
                c[w] -= 1
            for w in new:
                c[w] += 1
            out[n] = c
        return out

    def snapshots(self):
        """Yield ``(time, kind, measure)``; the initial entry has kind ``None``."""
        yield 0.0, None, self.initial_measure()
        types = list(self.initial)
        for s, kind, ag, new in zip(self.times, self.kinds, self.agents, self.after):
            for i, w in zip(ag, new):
                types[i] = w
            yield s, self.kind_names[kind], empirical_measure(AgentConfiguration(self.space, tuple(types)))

    def sample_array(self) -> np.ndarray:
        """Sampled measures as fractions, shape ``(len(sample_times), k)`` (finite spaces)."""
        if not self.space.is_finite:
            raise UnsupportedError("dense samples need a finite type space")
        return np.asarray(self.samples, dtype=float) / self.N

    def event_rows(self) -> Iterable[tuple]:
        fmt = self.space.format
        for n, (s, kind, ag, old, new) in enumerate(
                zip(self.times, self.kinds, self.agents, self.before, self.after)):
            yield (n, repr(s), self.kind_names[kind], ";".join(map(str, ag)),
                   ";".join(fmt(w) for w in old), ";".join(fmt(w) for w in new))

    def to_csv(self, fh) -> None:
        fh.write("# event log of the N-agent jump process; time in model time units; "
                 "types are agent states before/after each effective event\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("event_index", "time", "event_kind", "moved_agent_ids",
                    "type_before", "type_after"))
        w.writerows(self.event_rows())

    def fingerprint(self) -> str:
        buf = io.StringIO()
        self.to_csv(buf)
        buf.write(repr(self.initial))
        buf.write(repr(self.samples))
        return hashlib.sha256(buf.getvalue().encode()).hexdigest()


class Engine:
    """Thinning simulator bound to one model and one uniform stream."""

    def __init__(self, model: ModelSpec, init: AgentConfiguration, stream: UniformStream,
                 t0: float = 0.0):
        if init.space != model.space:
            raise ConfigError("initial configuration is not on the model's type space")
        self.model = model
        N = init.N
        self.rate_gamma = N * model.gamma_bar
        self.rate_lambda = N * model.lambda_bar
        self.channel_bounds = [c.bound(N) for c in model.channels]
        self.total_rate = self.rate_gamma + self.rate_lambda + sum(self.channel_bounds)
        if not self.total_rate > 0:
            raise ZeroRateError("total candidate rate is zero; no event can occur")
        if not math.isfinite(self.total_rate):
            raise ConfigError("rate bounds must be finite")
        finite = model.space.is_finite
        types = list(init.types)
        counts = nu = None
        if finite:
            counts = [0] * model.space.size
            for w in types:
                counts[w] += 1
            nu = [c / N for c in counts]
        self.state = EngineState(t0, types, model.space, stream, counts, nu)
        self.members = self.pos = None
        if model.channels:
            if not finite:
                raise UnsupportedError("aggregate channels need a finite type space")
            self.members = [[] for _ in range(model.space.size)]
            self.pos = [0] * N
            for i, w in enumerate(types):
                self.pos[i] = len(self.members[w])
                self.members[w].append(i)

    def _set(self, i: int, new) -> None:
        st = self.state
        old = st.types[i]
        st.types[i] = new
        if st.counts is not None:
            N = len(st.types)
            st.counts[old] -= 1
            st.counts[new] += 1
            st.nu[old] = st.counts[old] / N
            st.nu[new] = st.counts[new] / N
            if self.members is not None:
                lst = self.members[old]
                p = self.pos[i]
                last = lst.pop()
                if last != i:
                    lst[p] = last
                    self.pos[last] = p
                self.pos[i] = len(self.members[new])
                self.members[new].append(i)

    def _candidate(self):
        """Process one candidate; return ``(kind, agents, before, after)`` or ``None``."""
        st = self.state
        nxt = st.stream.next
        model = self.model
        N = len(st.types)
        st.candidate_count += 1
        v = nxt() * self.total_rate
        if v < self.rate_gamma:
            i = min(int(nxt() * N), N - 1)
            w = st.types[i]
            g = model.gamma(w, st.nu)
            if _over(g, model.gamma_bar):
                raise BoundViolation(f"gamma={g} exceeds gamma_bar={model.gamma_bar} at type {w!r}")
            if nxt() * model.gamma_bar >= g:
                return None
            new = model.sample_a(w, st.nu, nxt())
            st.event_count += 1
            if new == w:
                return None
            self._set(i, new)
            return TYPE_CHANGE, (i,), (w,), (new,)
        v -= self.rate_gamma
        if v < self.rate_lambda:
            i = min(int(nxt() * N), N - 1)
            j = min(int(nxt() * N), N - 1)
            if i == j:
                return None
            w1, w2 = st.types[i], st.types[j]
            lv = model.contact_lam(w1, w2, st.nu)
            if _over(lv, model.lambda_bar):
                raise BoundViolation(f"lambda={lv} exceeds lambda_bar={model.lambda_bar} "
                                     f"at types ({w1!r}, {w2!r})")
            if nxt() * model.lambda_bar >= lv:
                return None
            n1, n2 = model.sample_b(w1, w2, st.nu, nxt())
            st.event_count += 1
            if n1 == w1 and n2 == w2:
                return None
            self._set(i, n1)
            self._set(j, n2)
            return PAIR, (i, j), (w1, w2), (n1, n2)
        v -= self.rate_lambda
        for ch, bound in zip(model.channels, self.channel_bounds):
            if v < bound or ch is model.channels[-1]:
                rc = ch.rate(st.counts)
                if _over(rc, bound):
                    raise BoundViolation(f"channel {ch.name} rate {rc} exceeds bound {bound}")
                if nxt() * bound >= rc:
                    return None
                s1, s2 = ch.source
                m1, m2 = self.members[s1], self.members[s2]
                i = m1[min(int(nxt() * len(m1)), len(m1) - 1)]
                j = m2[min(int(nxt() * len(m2)), len(m2) - 1)]
                st.event_count += 1
                self._set(i, ch.target[0])
                self._set(j, ch.target[1])
                return CHANNEL, (i, j), (s1, s2), tuple(ch.target)
            v -= bound
        return None

    def step(self) -> bool:
        """Advance by one candidate; report whether it changed the configuration."""
        st = self.state
        st.time += -math.log(1.0 - st.stream.next()) / self.total_rate
        return self._candidate() is not None

    def run(self, T: float, sample_times: Sequence[float] = (), record: bool = True) -> Trajectory:
        st = self.state
        samples_at = sorted(float(s) for s in sample_times)
        if samples_at and (samples_at[0] < st.time or samples_at[-1] > T):
            raise ValueError("sample times must lie in [t0, T]")
        traj = Trajectory(self.model.space, st.N, float(T), tuple(st.types),
                          sample_times=tuple(samples_at))
        if self.model.channels:
            traj.kind_names = KIND_NAMES[:2] + (self.model.channels[0].name,)
        snap = (lambda: tuple(st.counts)) if st.counts is not None else (lambda: tuple(st.types))
        nxt = st.stream.next
        rate = self.total_rate
        log = math.log
        si = 0
        ns = len(samples_at)
        times, kinds, agents, before, after = (traj.times, traj.kinds, traj.agents,
                                               traj.before, traj.after)
        while True:
            t = st.time - log(1.0 - nxt()) / rate
            while si < ns and samples_at[si] < t and samples_at[si] <= T:
                traj.samples.append(snap())
                si += 1
            if t > T:
                break
            st.time = t
            ev = self._candidate()
            if ev is not None and record:
                times.append(t)
                kinds.append(ev[0])
                agents.append(ev[1])
                before.append(ev[2])
                after.append(ev[3])
        while si < ns:
            traj.samples.append(snap())
            si += 1
        st.time = float(T)
        traj.final = tuple(st.types)
        traj.event_count = st.event_count
        traj.candidate_count = st.candidate_count
        return traj


def step_exact(state: EngineState, model: ModelSpec) -> tuple[EngineState, bool]:
    """One thinning candidate applied to ``state`` (mutated in place and returned)."""
    eng = Engine(model, state.configuration(), state.stream, t0=state.time)
    eng.state.event_count = state.event_count
    eng.state.candidate_count = state.candidate_count
    accepted = eng.step()
    return eng.state, accepted


def initial_state(model: ModelSpec, init: AgentConfiguration, seed: int, replica: int = 0) -> EngineState:
    return Engine(model, init, UniformStream.from_seed(seed, replica, "dynamics")).state


def run_trajectory(model: ModelSpec, init: AgentConfiguration, T: float, seed: int,
                   replica: int = 0, sample_times: Sequence[float] = (),
                   record: bool = True) -> Trajectory:
    """Simulate on ``[0, T]``; reproducible given ``(seed, replica)``."""
    if T < 0:
        raise ValueError("T must be >= 0")
    N = init.N
    total = N * model.gamma_bar + N * model.lambda_bar + model.channel_bound(N)
    if total <= 0 or T == 0:
        st = tuple(init.types)
        snap = (tuple(empirical_measure(init).counts) if model.space.is_finite else st)
        return Trajectory(model.space, N, float(T), st, final=st,
                          sample_times=tuple(sorted(sample_times)),
                          samples=[snap] * len(sample_times), seed=(seed, replica))
    eng = Engine(model, init, UniformStream.from_seed(seed, replica, "dynamics"))
    traj = eng.run(T, sample_times=sample_times, record=record)
    traj.seed = (seed, replica)
    return traj


# ------------------------------------------------------------ initial laws

def _probability_vector(space: TypeSpace, nu0) -> np.ndarray:
    if isinstance(nu0, Mapping):
        p = np.zeros(space.size)
        for lab, v in nu0.items():
            p[space.index(lab)] += float(v)
    else:
        p = np.asarray(nu0, dtype=float)
    if p.shape != (space.size,):
        raise ConfigError(f"initial law has {p.size} entries for {space.size} types")
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ConfigError("initial probabilities must be finite and >= 0")
    if abs(p.sum() - 1.0) > 1e-9:
        raise ConfigError(f"initial probabilities sum to {p.sum()}, not 1")
    return p


def initial_law_vector(space: TypeSpace, nu0) -> np.ndarray:
    """The initial law as a probability vector on a finite space."""
    return _probability_vector(space, nu0)


def sample_product_initial(space: TypeSpace, nu0, N: int, seed: int,
                           replica: int = 0) -> AgentConfiguration:
    """N independent draws from ``nu0``.

    ``nu0`` is a probability vector / label mapping on finite spaces, or on the
    real line ``{"kind": "normal", "mean", "sd"}`` or
    ``{"kind": "grid", "x": [...], "density": [...]}``.
    """
    if N < 1:
        raise ConfigError("N must be >= 1")
    gen = generator(seed, replica, "init")
    if space.is_finite:
        p = _probability_vector(space, nu0)
        cdf = np.cumsum(p)
        idx = np.searchsorted(cdf, gen.random(N) * cdf[-1], side="right")
        idx = np.minimum(idx, space.size - 1)
        return AgentConfiguration(space, tuple(int(i) for i in idx))
    if space.kind != REAL:
        raise UnsupportedError("product initial laws on lattices are not supported")
    kind = nu0.get("kind")
    if kind == "normal":
        sd = float(nu0["sd"])
        if not sd > 0:
            raise ConfigError("normal initial law needs sd > 0")
        x = gen.normal(float(nu0["mean"]), sd, N)
    elif kind == "grid":
        xs = np.asarray(nu0["x"], dtype=float)
        dens = np.asarray(nu0["density"], dtype=float)
        if np.any(dens < 0):
            raise ConfigError("density must be >= 0")
        mass = np.trapezoid(dens, xs)
        if abs(mass - 1.0) > 1e-6:
            raise ConfigError(f"density integrates to {mass}, not 1")
        from .measure import reference_cdf
        x = np.interp(gen.random(N), reference_cdf(xs, dens), xs)
    else:
        raise ConfigError(f"unknown real initial law {kind!r}")
    return AgentConfiguration(space, tuple(float(v) for v in x))


# ------------------------------------------------------ discrete-time oracle

MAX_SLOT_PROBABILITY = 0.1


def _slot_candidates(model: FiniteModel, types: list, counts: list):
    """Enumerate ``(rate, agents, new types)`` over all single-agent and pair moves."""
    N = len(types)
    nu = np.asarray(counts, dtype=float) / N
    Ga, Lb = model.rate_tables(nu)
    k = len(counts)
    out = []
    for i in range(N):
        w = types[i]
        for v in range(k):
            r = Ga[w, v]
            if v != w and r > 0:
                out.append((r, (i,), (v,)))
    if Lb is not None:
        for i in range(N):
            for j in range(N):
                if i == j:
                    continue
                sub = Lb[types[i], types[j]]
                for a, b in zip(*np.nonzero(sub)):
                    if (a, b) != (types[i], types[j]):
                        out.append((sub[a, b] / N, (i, j), (int(a), int(b))))
    return out


def oracle_discrete_time(model: ModelSpec, init: AgentConfiguration, T: float, dt: float,
                         seed: int, replica: int = 0) -> Trajectory:
    """Time-discretized generator: each candidate fires with probability rate*dt.

    At most one candidate fires per slot, chosen by walking the fixed
    enumeration order (agents, then ordered pairs) with one uniform variate.
    """
    if not isinstance(model, FiniteModel):
        raise UnsupportedError("the discrete-time oracle needs a finite-type model")
    if dt <= 0:
        raise ValueError("dt must be > 0")
    stream = UniformStream.from_seed(seed, replica, "oracle")
    types = list(init.types)
    k = model.space.size
    counts = [0] * k
    for w in types:
        counts[w] += 1
    traj = Trajectory(model.space, init.N, float(T), tuple(types), seed=(seed, replica))
    n_slots = int(round(T / dt))
    cache: dict = {}
    for n in range(n_slots):
        key = (tuple(types))
        cands = cache.get(key)
        if cands is None:
            cands = _slot_candidates(model, types, counts)
            cache[key] = cands
        total = sum(c[0] for c in cands) * dt
        if total > MAX_SLOT_PROBABILITY:
            raise StepSizeError(f"slot jump probability {total:.3g} exceeds "
                                f"{MAX_SLOT_PROBABILITY}; reduce dt")
        u = stream.next()
        if u >= total:
            continue
        acc = 0.0
        for r, ag, new in cands:
            acc += r * dt
            if u < acc:
                old = tuple(types[i] for i in ag)
                for i, w in zip(ag, new):
                    counts[types[i]] -= 1
                    counts[w] += 1
                    types[i] = w
                traj.times.append((n + 1) * dt)
                traj.kinds.append(TYPE_CHANGE if len(ag) == 1 else PAIR)
                traj.agents.append(ag)
                traj.before.append(old)
                traj.after.append(new)
                break
    traj.final = tuple(types)
    traj.event_count = len(traj.times)
    return traj


def oracle_end_counts(model: FiniteModel, init: AgentConfiguration, T: float, dt: float,
                      seed: int, runs: int) -> np.ndarray:
    """Final count profiles of ``runs`` independent discrete-time oracle runs.

    Same scheme as :func:`oracle_discrete_time`, aggregated over agents of equal
    type (exchangeability) and vectorized over runs.
    """
    if dt <= 0:
        raise ValueError("dt must be > 0")
    N = init.N
    k = model.space.size
    gen = generator(seed, 0, "oracle")
    c0 = np.bincount(np.asarray(init.types), minlength=k)
    state = np.tile(c0, (runs, 1))
    table: dict = {}

    def transitions(profile: tuple):
        nu = np.asarray(profile, dtype=float) / N
        Ga, Lb = model.rate_tables(nu)
        rates, deltas = [], []
        for w in range(k):
            for v in range(k):
                if v != w and Ga[w, v] > 0 and profile[w] > 0:
                    d = np.zeros(k, dtype=np.int64)
                    d[w] -= 1
                    d[v] += 1
                    rates.append(profile[w] * Ga[w, v])
                    deltas.append(d)
        if Lb is not None:
            for w1 in range(k):
                for w2 in range(k):
                    npairs = profile[w1] * (profile[w2] - (w1 == w2))
                    if npairs <= 0:
                        continue
                    sub = Lb[w1, w2]
                    for a, b in zip(*np.nonzero(sub)):
                        if (a, b) == (w1, w2):
                            continue
                        d = np.zeros(k, dtype=np.int64)
                        d[w1] -= 1
                        d[w2] -= 1
                        d[a] += 1
                        d[b] += 1
                        rates.append(npairs * sub[a, b] / N)
                        deltas.append(d)
        cum = np.cumsum(np.asarray(rates, dtype=float)) * dt
        if cum.size and cum[-1] > MAX_SLOT_PROBABILITY:
            raise StepSizeError(f"slot jump probability {cum[-1]:.3g} exceeds "
                                f"{MAX_SLOT_PROBABILITY}; reduce dt")
        return cum, (np.asarray(deltas) if deltas else np.zeros((0, k), dtype=np.int64))

    radix = (N + 1) ** np.arange(k, dtype=np.int64)
    for _ in range(int(round(T / dt))):
        u = gen.random(runs)
        codes, inverse = np.unique(state @ radix, return_inverse=True)
        inverse = inverse.reshape(-1)
        for p_idx, code in enumerate(codes.tolist()):
            key = tuple((code // (N + 1) ** j) % (N + 1) for j in range(k))
            if key not in table:
                table[key] = transitions(key)
            cum, deltas = table[key]
            if cum.size == 0:
                continue
            rows = np.flatnonzero(inverse == p_idx)
            pick_ = np.searchsorted(cum, u[rows], side="right")
            fire = pick_ < cum.size
            state[rows[fire]] += deltas[pick_[fire]]
    return state
