"""Sweep configuration: a TOML document whose keys can all be overridden by flags."""
from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field, fields

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .measurement import BlochDirection

OUTPUT_DIR_ENV = "DNILAB_OUTPUT_DIR"
MIN_MC_SAMPLES = 1000

# flat key -> config section
SECTIONS = {
    "kind": "model", "gamma": "model", "chi": "model", "n": "model", "g": "model",
    "tau_c": "model", "env_up": "model",
    "x": "scheme", "y": "scheme", "z": "scheme",
    "start": "grid", "stop": "grid", "steps": "grid", "tau": "grid",
    "seed": "run", "samples": "run", "threads": "run", "out": "run", "tol": "run",
    "param": "threshold", "lo": "threshold", "hi": "threshold", "n_bar": "threshold",
    "reference": "threshold",
}

# keys that do not change results and are kept out of the hash
VOLATILE = {"threads", "out"}


class ConfigError(ValueError):
    pass


@dataclass
class SweepConfig:
    kind: str = "markov-dephasing"
    gamma: float | None = None
    chi: float | None = None
    n: int | None = None
    g: float | None = None
    tau_c: float | None = None
    env_up: float = 0.5
    x: str = "1.5707963267948966,0"
    y: str = "dni"
    z: str = "1.5707963267948966,0"
    start: float = 0.0
    stop: float = 3.0
    steps: int = 31
    tau: str = "equal"
    seed: int = 0
    samples: int = 100_000
    threads: int = 1
    out: str | None = None
    tol: float = 1e-9
    param: str | None = None
    lo: float = 0.0
    hi: float = 1.0
    n_bar: str = "1,2,3,4,5,6"
    reference: float | None = None

    def validate(self) -> "SweepConfig":
        if self.steps < 2:
            raise ConfigError("grid.steps must be >= 2")
        if not self.stop >= self.start >= 0:
            raise ConfigError("grid needs 0 <= start <= stop")
        if self.kind == "ou-mc" and self.samples < MIN_MC_SAMPLES:
            raise ConfigError(f"Monte Carlo needs samples >= {MIN_MC_SAMPLES}")
        if self.param not in (None, "chi", "tau_c"):
            raise ConfigError("threshold.param must be 'chi' or 'tau_c'")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        for key in ("x", "z"):
            parse_direction(getattr(self, key))
        if self.y != "dni":
            parse_direction(self.y)
        self.tau_grid()
        return self

    # -- derived views ---------------------------------------------------------

    def t_grid(self) -> np.ndarray:
        return np.linspace(self.start, self.stop, self.steps)

    def tau_grid(self) -> np.ndarray | None:
        """``None`` means tau = t at every grid point."""
        if self.tau == "equal":
            return None
        parts = str(self.tau).split(":")
        try:
            if len(parts) == 1:
                return np.array([float(parts[0])])
            a, b, k = float(parts[0]), float(parts[1]), int(parts[2])
        except (ValueError, IndexError) as exc:
            raise ConfigError(f"tau must be 'equal', a number or start:stop:steps, got {self.tau!r}") from exc
        if k < 1:
            raise ConfigError("tau grid needs steps >= 1")
        return np.linspace(a, b, k)

    def time_pairs(self) -> list[tuple[float, float]]:
        taus = self.tau_grid()
        if taus is None:
            return [(float(t), float(t)) for t in self.t_grid()]
        return [(float(t), float(s)) for t in self.t_grid() for s in taus]

    def n_bars(self) -> list[int]:
        return [int(v) for v in str(self.n_bar).split(",") if v.strip()]

    def engine_kwargs(self) -> dict:
        kw = {k: getattr(self, k) for k in ("gamma", "chi", "n", "g", "tau_c", "env_up")
              if getattr(self, k) is not None}
        kw.update(samples=self.samples, seed=self.seed)
        return kw

    def stable_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if k not in VOLATILE}

    def digest(self) -> str:
        blob = json.dumps(self.stable_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def output_path(self, command: str, suffix: str = ".csv") -> str:
        if self.out:
            return self.out
        base = os.environ.get(OUTPUT_DIR_ENV, ".")
        return os.path.join(base, f"{command}{suffix}")


def parse_direction(text: str) -> BlochDirection:
    """``"theta,phi"`` in radians, or one of the axis names ``x``, ``y``, ``z``."""
    named = {"x": (math.pi / 2, 0.0), "y": (math.pi / 2, math.pi / 2), "z": (0.0, 0.0)}
    text = str(text).strip()
    if text in named:
        return BlochDirection(*named[text])
    try:
        theta, phi = (float(v) for v in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"direction must be 'theta,phi' or x/y/z, got {text!r}") from exc
    return BlochDirection(theta, phi)


def _coerce(key: str, value):
    kinds = {f.name: f.type for f in fields(SweepConfig)}
    declared = kinds[key]
    if value is None:
        return None
    if "int" in declared and "float" not in declared:
        return int(value)
    if "float" in declared:
        return float(value)
    if isinstance(value, (list, tuple)):
        return ",".join(str(v) for v in value)
    return str(value)


def load_config(path: str | None, overrides: dict | None = None) -> SweepConfig:
    """Read a TOML file (sections model/scheme/grid/run/threshold) and apply flag overrides."""
    values: dict = {}
    if path:
        try:
            with open(path, "rb") as fh:
                doc = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        for section, body in doc.items():
            if not isinstance(body, dict):
                raise ConfigError(f"top-level key {section!r} must be a section")
            for key, value in body.items():
                if SECTIONS.get(key) != section:
                    raise ConfigError(f"unknown key {section}.{key}")
                values[key] = value
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = value
    try:
        cfg = SweepConfig(**{k: _coerce(k, v) for k, v in values.items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg.validate()
