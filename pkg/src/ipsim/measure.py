"""Type spaces, agent configurations, empirical measures and test functions.

Agent types are represented as plain Python values:

* finite label spaces use the label *index* (``int``),
* integer lattices use tuples of ``int``,
* the real line uses ``float``.

Empirical measures keep integer counts over ``N``; conversion to floating
point happens only when pairing against a test function.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, SpaceMismatchError

FINITE = "finite"
LATTICE = "lattice"
REAL = "real"


@dataclass(frozen=True)
class TypeSpace:
    """The set W of possible agent types."""

    kind: str
    labels: tuple[str, ...] = ()
    dim: int = 0
    bound: float = 0.0

    def __post_init__(self):
        if self.kind == FINITE:
            if len(self.labels) < 1 or len(set(self.labels)) != len(self.labels):
                raise ConfigError("finite type space needs >= 1 distinct labels")
        elif self.kind == LATTICE:
            if self.dim < 1:
                raise ConfigError("lattice dimension must be >= 1")
        elif self.kind == REAL:
            if not self.bound > 0:
                raise ConfigError("real-line truncation bound must be > 0")
        else:
            raise ConfigError(f"unknown type space kind {self.kind!r}")

    @classmethod
    def finite(cls, labels: Iterable[Any]) -> "TypeSpace":
        return cls(FINITE, labels=tuple(str(x) for x in labels))

    @classmethod
    def lattice(cls, dim: int) -> "TypeSpace":
        return cls(LATTICE, dim=int(dim))

    @classmethod
    def real(cls, bound: float) -> "TypeSpace":
        return cls(REAL, bound=float(bound))

    @property
    def is_finite(self) -> bool:
        return self.kind == FINITE

    @property
    def size(self) -> int:
        if not self.is_finite:
            raise ValueError("only finite type spaces have a size")
        return len(self.labels)

    def index(self, label: Any) -> int:
        """Label index for a symbol (or an index passed through)."""
        if isinstance(label, (int, np.integer)) and not isinstance(label, bool):
            if 0 <= label < len(self.labels):
                return int(label)
            raise ValueError(f"label index {label} out of range")
        try:
            return self.labels.index(str(label))
        except ValueError:
            raise ValueError(f"unknown label {label!r}") from None

    def contains(self, value: Any) -> bool:
        if self.kind == FINITE:
            return isinstance(value, (int, np.integer)) and 0 <= value < len(self.labels)
        if self.kind == LATTICE:
            return (isinstance(value, tuple) and len(value) == self.dim
                    and all(isinstance(v, (int, np.integer)) for v in value))
        return isinstance(value, (float, int, np.floating)) and math.isfinite(value)

    def format(self, value: Any) -> str:
        if self.kind == FINITE:
            return self.labels[value]
        if self.kind == LATTICE:
            return ",".join(str(v) for v in value)
        return repr(float(value))


@dataclass(frozen=True)
class AgentConfiguration:
    """Types of the N agents, ``types[i]`` being the type of agent ``i``."""

    space: TypeSpace
    types: tuple

    def __post_init__(self):
        if len(self.types) < 1:
            raise ConfigError("configuration must contain at least one agent")

    @classmethod
    def from_labels(cls, space: TypeSpace, labels: Sequence[Any]) -> "AgentConfiguration":
        if space.is_finite:
            return cls(space, tuple(space.index(x) for x in labels))
        if space.kind == REAL:
            return cls(space, tuple(float(x) for x in labels))
        return cls(space, tuple(tuple(int(v) for v in x) for x in labels))

    @property
    def N(self) -> int:
        return len(self.types)

    def validate(self) -> None:
        bad = [i for i, w in enumerate(self.types) if not self.space.contains(w)]
        if bad:
            raise ConfigError(f"agents {bad[:5]} hold types outside the space")


@dataclass(frozen=True)
class EmpiricalMeasure:
    """Normalized counts: mass ``count/N`` on every occupied type.

    For finite spaces ``counts`` is a dense tuple indexed by label; otherwise it
    is a sorted tuple of ``(type, count)`` pairs.
    """

    space: TypeSpace
    N: int
    counts: tuple

    def __post_init__(self):
        total = sum(self.counts) if self.space.is_finite else sum(c for _, c in self.counts)
        if total != self.N:
            raise ValueError(f"counts sum to {total}, expected N={self.N}")

    @classmethod
    def from_counts(cls, space: TypeSpace, counts: Sequence[int]) -> "EmpiricalMeasure":
        counts = tuple(int(c) for c in counts)
        if any(c < 0 for c in counts):
            raise ValueError("negative count")
        return cls(space, sum(counts), counts)

    def mass(self, w: Any) -> Fraction:
        if self.space.is_finite:
            return Fraction(self.counts[self.space.index(w)], self.N)
        for v, c in self.counts:
            if v == w:
                return Fraction(c, self.N)
        return Fraction(0)

    def total_mass(self) -> Fraction:
        if self.space.is_finite:
            return Fraction(sum(self.counts), self.N)
        return Fraction(sum(c for _, c in self.counts), self.N)

    def dense(self) -> np.ndarray:
        """Probability vector (finite spaces only)."""
        if not self.space.is_finite:
            raise ValueError("dense vectors need a finite type space")
        return np.asarray(self.counts, dtype=float) / self.N

    def atoms(self) -> tuple[np.ndarray, np.ndarray]:
        """Support points and integer counts."""
        if self.space.is_finite:
            return np.arange(len(self.counts)), np.asarray(self.counts)
        pts = [v for v, _ in self.counts]
        return np.asarray(pts), np.asarray([c for _, c in self.counts])


def empirical_measure(config: AgentConfiguration) -> EmpiricalMeasure:
    space = config.space
    if space.is_finite:
        counts = np.bincount(np.asarray(config.types, dtype=np.int64), minlength=space.size)
        return EmpiricalMeasure(space, config.N, tuple(int(c) for c in counts))
    tally = Counter(config.types)
    return EmpiricalMeasure(space, config.N, tuple(sorted(tally.items())))


@dataclass(frozen=True)
class TestFunction:
    """A declarative bounded/polynomial function on W.

    ``kind`` is one of ``indicator``, ``monomial``, ``smooth`` or ``constant``.
    Indicators take either ``labels`` (finite/lattice spaces) or a half-open
    ``interval`` ``[lo, hi)`` on the real line.
    """

    __test__ = False  # not a pytest class

    kind: str
    params: Mapping[str, Any] = field(default_factory=dict)

    @classmethod
    def indicator(cls, labels=None, interval=None) -> "TestFunction":
        if (labels is None) == (interval is None):
            raise ConfigError("indicator needs exactly one of labels / interval")
        if labels is not None:
            return cls("indicator", {"labels": tuple(labels)})
        lo, hi = interval
        return cls("indicator", {"interval": (float(lo), float(hi))})

    @classmethod
    def monomial(cls, power: int, center: float = 0.0) -> "TestFunction":
        return cls("monomial", {"power": int(power), "center": float(center)})

    @classmethod
    def smooth(cls, family: str, a: float = 1.0, b: float = 0.0) -> "TestFunction":
        if family not in ("cos", "tanh"):
            raise ConfigError(f"unknown smooth family {family!r}")
        return cls("smooth", {"family": family, "a": float(a), "b": float(b)})

    @classmethod
    def constant(cls, c: float = 1.0) -> "TestFunction":
        return cls("constant", {"c": float(c)})

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "TestFunction":
        kind = d.get("kind")
        if kind == "indicator":
            return cls.indicator(d.get("labels"), d.get("interval"))
        if kind == "monomial":
            return cls.monomial(d["power"], d.get("center", 0.0))
        if kind == "smooth":
            return cls.smooth(d["family"], d.get("a", 1.0), d.get("b", 0.0))
        if kind == "constant":
            return cls.constant(d.get("c", 1.0))
        raise ConfigError(f"unknown test function kind {kind!r}")

    def values(self, space: TypeSpace, points) -> np.ndarray:
        """Evaluate at an array of types from ``space``."""
        p = self.params
        if self.kind == "constant":
            return np.full(len(points), p["c"], dtype=float)
        if space.kind == LATTICE:
            pts = [tuple(x) for x in points]
            if self.kind == "indicator":
                if "labels" not in p:
                    raise ValueError("lattice indicators take label sets")
                members = {tuple(int(v) for v in x) for x in p["labels"]}
                return np.array([1.0 if x in members else 0.0 for x in pts])
            # non-indicator kinds act on the first coordinate of lattice points
            x = np.array([q[0] for q in pts], dtype=float)
        else:
            x = np.asarray(points)
        if self.kind == "indicator":
            if "labels" in p:
                if space.is_finite:
                    idx = [space.index(lab) for lab in p["labels"]]
                    return np.isin(x, idx).astype(float)
                return np.isin(x, np.asarray(p["labels"], dtype=float)).astype(float)
            lo, hi = p["interval"]
            x = x.astype(float)
            return ((x >= lo) & (x < hi)).astype(float)
        x = x.astype(float)
        if self.kind == "monomial":
            return (x - p["center"]) ** p["power"]
        if self.kind == "smooth":
            arg = p["a"] * x + p["b"]
            return np.cos(arg) if p["family"] == "cos" else np.tanh(arg)
        raise ValueError(f"unknown test function kind {self.kind!r}")

    def on_space(self, space: TypeSpace) -> np.ndarray:
        """Dense value vector over a finite space."""
        return self.values(space, np.arange(space.size))

    def __call__(self, space: TypeSpace, w) -> float:
        return float(self.values(space, [w])[0])


def pair(measure, phi: TestFunction, space: TypeSpace | None = None, *,
         probability: bool = False) -> float:
    """Integral of ``phi`` against a measure.

    ``measure`` is an :class:`EmpiricalMeasure` or a dense (possibly signed)
    mass vector over the finite ``space``.  Constants integrate to themselves
    exactly whenever the measure is known to be a probability measure.
    """
    if isinstance(measure, EmpiricalMeasure):
        if phi.kind == "constant":
            return phi.params["c"]
        pts, counts = measure.atoms()
        vals = phi.values(measure.space, pts)
        return float(np.dot(vals, counts)) / measure.N
    if space is None:
        raise ValueError("dense measures need their type space")
    if probability and phi.kind == "constant":
        return phi.params["c"]
    m = np.asarray(measure, dtype=float)
    if m.shape != (space.size,):
        raise SpaceMismatchError(f"vector of shape {m.shape} on a space of size {space.size}")
    return float(np.dot(phi.on_space(space), m))


def _as_vector(m) -> np.ndarray:
    if isinstance(m, EmpiricalMeasure):
        return m.dense()
    return np.asarray(m, dtype=float)


def tv_distance(m1, m2) -> float:
    """Total variation distance between two probability vectors on one finite space."""
    if isinstance(m1, EmpiricalMeasure) and isinstance(m2, EmpiricalMeasure):
        if m1.space != m2.space:
            raise SpaceMismatchError("measures live on different type spaces")
        # exact integer arithmetic
        num = sum(abs(a * m2.N - b * m1.N) for a, b in zip(m1.counts, m2.counts))
        return float(Fraction(num, 2 * m1.N * m2.N))
    v1, v2 = _as_vector(m1), _as_vector(m2)
    if v1.shape != v2.shape:
        raise SpaceMismatchError(f"shapes {v1.shape} and {v2.shape} differ")
    return 0.5 * float(np.abs(v1 - v2).sum())


def reference_cdf(grid: np.ndarray, density: np.ndarray) -> np.ndarray:
    """Trapezoidal CDF of a gridded density, normalized to end at 1."""
    grid = np.asarray(grid, dtype=float)
    density = np.asarray(density, dtype=float)
    steps = 0.5 * (density[1:] + density[:-1]) * np.diff(grid)
    cdf = np.concatenate([[0.0], np.cumsum(steps)])
    total = cdf[-1]
    if total <= 0:
        raise ValueError("reference density has no mass")
    return cdf / total


def ks_distance(samples, grid, density) -> float:
    """Sup over grid points of |empirical CDF - reference CDF|.

    Samples beyond either end of the grid still count in the empirical CDF.
    """
    s = np.sort(np.asarray(samples, dtype=float))
    if s.size == 0:
        raise ValueError("empty sample")
    grid = np.asarray(grid, dtype=float)
    ecdf = np.searchsorted(s, grid, side="right") / s.size
    return float(np.max(np.abs(ecdf - reference_cdf(grid, density))))
