"""Run configuration: flat ``key = value`` files, flag overrides and validation.

File syntax, one entry per line::

    # comment
    scenario = single-boolean
    trials = 500
    x0 = [-0.5, 0.0]

Values are parsed as JSON where possible (numbers, ``true``/``false``,
``null``, lists) and otherwise taken as bare strings. Precedence, highest
first: command-line flags, the config file, ``NSCBF_SEED`` (seed only),
built-in defaults.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, fields

from . import scenarios
from .errors import ConfigError

SCENARIOS = ("single-boolean", "multi-swap")
SEED_ENV = "NSCBF_SEED"


@dataclass
class RunConfig:
    scenario: str = "single-boolean"
    trials: int = 500
    dt: float = 1e-3
    horizon: float | None = None
    seed: int = 0
    epsilon: float = 0.05
    filter: bool = True
    sigma: float = scenarios.SIGMA
    n_agents: int = scenarios.SWAP_AGENTS
    collision_radius: float = scenarios.SWAP_RADIUS
    kp: float | None = None
    x0: list[float] | None = None
    slack_penalty: float | None = None
    u_max: float | None = None
    workers: int = 1
    csv_trials: int | None = None
    output_dir: str = "nscbf-out"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        values = {}
        for key, value in data.items():
            if key not in FIELD_TYPES:
                raise ConfigError("unknown key", key=key)
            values[key] = _coerce(key, value)
        cfg = cls(**values)
        cfg.validate()
        return cfg

    def resolved(self) -> "RunConfig":
        """Copy with scenario-dependent defaults filled in."""
        d = self.to_dict()
        single = self.scenario == "single-boolean"
        if d["horizon"] is None:
            d["horizon"] = scenarios.SINGLE_HORIZON if single else scenarios.SWAP_HORIZON
        if d["kp"] is None:
            d["kp"] = scenarios.SINGLE_KP if single else scenarios.SWAP_KP
        if d["x0"] is None and single:
            d["x0"] = list(scenarios.SINGLE_X0)
        cfg = RunConfig(**d)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"must be one of {', '.join(SCENARIOS)}", key="scenario")
        positive = ["dt", "sigma", "collision_radius"]
        for key in positive + ["horizon", "kp", "slack_penalty", "u_max"]:
            v = getattr(self, key)
            if v is not None and not v > 0:
                raise ConfigError(f"must be positive, got {v!r}", key=key)
        for key in ("trials", "workers"):
            if getattr(self, key) < 1:
                raise ConfigError(f"must be at least 1, got {getattr(self, key)!r}", key=key)
        if self.n_agents < 2:
            raise ConfigError(f"must be at least 2, got {self.n_agents!r}", key="n_agents")
        if self.csv_trials is not None and self.csv_trials < 0:
            raise ConfigError("must be non-negative", key="csv_trials")
        if not self.epsilon >= 0:
            raise ConfigError(f"must be non-negative, got {self.epsilon!r}", key="epsilon")
        if self.horizon is not None and not self.horizon > self.dt:
            raise ConfigError(f"must exceed dt ({self.dt!r})", key="horizon")
        if self.x0 is not None:
            if self.scenario != "single-boolean":
                raise ConfigError("only applies to the single-boolean scenario", key="x0")
            if len(self.x0) != 2:
                raise ConfigError("must have two entries", key="x0")


FIELD_TYPES = {
    "scenario": str, "trials": int, "dt": float, "horizon": float, "seed": int, "epsilon": float,
    "filter": bool, "sigma": float, "n_agents": int, "collision_radius": float, "kp": float,
    "x0": list, "slack_penalty": float, "u_max": float, "workers": int, "csv_trials": int,
    "output_dir": str,
}
OPTIONAL = {"horizon", "kp", "x0", "slack_penalty", "u_max", "csv_trials"}

assert set(FIELD_TYPES) == {f.name for f in fields(RunConfig)}


def _coerce(key, value, line=None):
    kind = FIELD_TYPES[key]
    if value is None:
        if key in OPTIONAL:
            return None
        raise ConfigError("may not be null", key=key, line=line)
    bad = ConfigError(f"expected {kind.__name__}, got {value!r}", key=key, line=line)
    if kind is bool:
        if not isinstance(value, bool):
            raise bad
        return value
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise bad
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise bad
        return float(value)
    if kind is list:
        if not isinstance(value, list) or not all(isinstance(v, (int, float)) and not isinstance(v, bool)
                                                  for v in value):
            raise bad
        return [float(v) for v in value]
    if not isinstance(value, str):
        raise bad
    return value


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_file(text: str) -> dict:
    """Parse a flat ``key = value`` document into typed values."""
    out: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", line=lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in FIELD_TYPES:
            raise ConfigError("unknown key", key=key, line=lineno)
        if key in out:
            raise ConfigError("duplicate key", key=key, line=lineno)
        out[key] = _coerce(key, _parse_value(value), line=lineno)
    return out


def parse_config(text: str = "", overrides: dict | None = None, env=None) -> RunConfig:
    """Merge defaults, ``NSCBF_SEED``, the file contents and flag overrides."""
    env = os.environ if env is None else env
    values: dict = {}
    if env.get(SEED_ENV):
        try:
            values["seed"] = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}", key="seed") from None
    values.update(parse_file(text))
    for key, value in (overrides or {}).items():
        if key not in FIELD_TYPES:
            raise ConfigError("unknown key", key=key)
        values[key] = _coerce(key, value)
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg
