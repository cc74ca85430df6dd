"""Experiment configuration: JSON files validated against the shipped schema."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path

from jsonschema import Draft202012Validator

from .engine import initial_law_vector, sample_product_initial
from .errors import ConfigError
from .measure import AgentConfiguration, TestFunction, empirical_measure
from .models import ModelSpec, build_model

SCHEMA_VERSION = 1


class ConfigErrors(ConfigError):
    """All violations found in one configuration."""

    def __init__(self, violations: list[str]):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


@lru_cache(maxsize=1)
def load_schema() -> dict:
    text = resources.files("ipsim").joinpath("schema/experiment.schema.json").read_text()
    return json.loads(text)


def _where(path) -> str:
    return ".".join(str(p) for p in path)


def _message(err) -> str:
    where = _where(err.absolute_path)
    if err.validator == "required":
        missing = err.message.split("'")[1]
        return f"{where + '.' if where else ''}{missing} required"
    if err.validator == "additionalProperties":
        return f"{where or '<root>'}: {err.message}"
    return f"{where or '<root>'}: {err.message}"


def schema_violations(raw) -> list[str]:
    validator = Draft202012Validator(load_schema())
    errs = sorted(validator.iter_errors(raw), key=lambda e: (list(map(str, e.absolute_path)), e.message))
    return [_message(e) for e in errs]


@dataclass
class ExperimentConfig:
    raw: dict
    model: ModelSpec
    source: str = "<dict>"

    @property
    def initial(self) -> dict:
        return self.raw["initial"]

    @property
    def run(self) -> dict:
        return self.raw["run"]

    @property
    def analysis(self) -> dict:
        return self.raw.get("analysis", {})

    @property
    def output(self) -> dict:
        return self.raw.get("output", {})

    def digest(self) -> str:
        canon = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    def fixed_configuration(self) -> AgentConfiguration | None:
        labels = self.initial.get("configuration")
        if labels is None:
            return None
        return AgentConfiguration.from_labels(self.model.space, labels)

    def initial_law(self):
        """Probability vector / density spec of the initial law."""
        fixed = self.fixed_configuration()
        if fixed is not None:
            if not self.model.space.is_finite:
                raise ConfigError("a fixed real-valued configuration has no density law")
            return empirical_measure(fixed).dense().tolist()
        law = self.initial["law"]
        if self.model.space.is_finite:
            return initial_law_vector(self.model.space, law).tolist()
        return law

    def initial_configuration(self, N: int | None, seed: int, replica: int) -> AgentConfiguration:
        fixed = self.fixed_configuration()
        if fixed is not None:
            if N is not None and N != fixed.N:
                raise ConfigError(f"run.N={N} but the initial configuration has {fixed.N} agents")
            return fixed
        if N is None:
            raise ConfigError("run.N required")
        return sample_product_initial(self.model.space, self.initial["law"], N, seed, replica)

    def test_functions(self) -> list[TestFunction]:
        return [TestFunction.from_dict(d) for d in self.analysis.get("test_functions", [])]


def _semantic(raw: dict) -> tuple[ModelSpec | None, list[str]]:
    out = []
    model = None
    try:
        model = build_model(raw["model"]["name"], raw["model"].get("params", {}))
    except (ConfigError, ValueError, KeyError, TypeError) as exc:
        out.append(f"model.params: {exc}")
    if model is not None:
        init = raw["initial"]
        try:
            if "configuration" in init:
                AgentConfiguration.from_labels(model.space, init["configuration"])
            elif model.space.is_finite:
                initial_law_vector(model.space, init["law"])
            elif not (isinstance(init["law"], dict) and init["law"].get("kind") == "normal"):
                out.append("initial.law: real type spaces need a normal law")
        except (ConfigError, ValueError, KeyError) as exc:
            out.append(f"initial: {exc}")
    for i, d in enumerate(raw.get("analysis", {}).get("test_functions", [])):
        try:
            TestFunction.from_dict(d)
        except (ConfigError, KeyError, TypeError) as exc:
            out.append(f"analysis.test_functions.{i}: {exc}")
    band = raw.get("analysis", {}).get("slope_band")
    if band is not None and band[0] > band[1]:
        out.append("analysis.slope_band: lower end exceeds upper end")
    return model, out


def config_from_dict(raw, source: str = "<dict>") -> ExperimentConfig:
    violations = schema_violations(raw)
    if violations:
        raise ConfigErrors(violations)
    model, violations = _semantic(raw)
    if violations:
        raise ConfigErrors(violations)
    return ExperimentConfig(raw, model, source)


def validate_config(path) -> ExperimentConfig:
    """Load and validate; raises :class:`ConfigErrors` listing every violation."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigErrors([f"{path}: cannot read ({exc.strerror})"]) from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigErrors([f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}"]) from None
    return config_from_dict(raw, str(path))
