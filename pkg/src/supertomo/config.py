"""Flat ``key = value`` experiment configuration.

Lines are ``key = value``; ``#`` starts a comment.  ``model`` and ``solver``
are required, every other key has a default.  ``auto`` for ``lambda0`` or
``gamma0`` requests calibration from the first iteration.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields
from pathlib import Path

MODELS = ("emission", "transmission")
SOLVERS = ("em", "saem", "ssaem")
SUPERIORIZERS = ("none", "standard", "subgrad", "prox")
REQUIRED = ("model", "solver")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    model: str
    solver: str
    n_side: int = 128
    n_angles: int = 32
    n_rays: int = 182
    fov_radius: float | None = None
    strings: int = 1
    weights: tuple[float, ...] | None = None
    lambda0: float | None = None
    tau: float = 1e-14
    superiorizer: str = "none"
    beta0: float = 1.0
    alpha: float = 0.95
    sup_n: int = 10
    ell_mode: str = "iteration"
    max_trials: int = 10_000
    gamma0: float | None = None
    gamma_refinements: int = 3
    subgrad_n: int = 50
    prox_max_inner: int = 100
    prox_tol: float = 1e-8
    stop_threshold: float = 400.0
    max_iters: int = 500
    repetitions: int = 15
    seed: int = 0
    output_dir: str = "runs"
    phantom_scale: float = 1.0
    snr_db: float = 18.0
    blank_level: float = 1e4
    dark_level: float = 5.0
    timing: bool = True

    def __post_init__(self):
        _choice("model", self.model, MODELS)
        _choice("solver", self.solver, SOLVERS)
        _choice("superiorizer", self.superiorizer, SUPERIORIZERS)
        _choice("ell_mode", self.ell_mode, ("iteration", "persistent"))
        for key in ("n_side", "n_angles", "n_rays", "strings", "sup_n", "max_trials",
                    "subgrad_n", "prox_max_inner", "repetitions"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1")
        for key in ("gamma_refinements", "max_iters", "seed"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key} must be >= 0")
        for key in ("tau", "beta0", "prox_tol", "phantom_scale", "blank_level"):
            if not getattr(self, key) > 0:
                raise ConfigError(f"{key} must be positive")
        if not 0 < self.alpha < 1:
            raise ConfigError("alpha must lie in (0, 1)")
        if self.dark_level < 0:
            raise ConfigError("dark_level must be >= 0")
        for key in ("lambda0", "gamma0", "fov_radius"):
            v = getattr(self, key)
            if v is not None and not v > 0:
                raise ConfigError(f"{key} must be positive or auto")
        if self.model == "transmission" and self.solver == "em":
            raise ConfigError("solver em requires model = emission")
        if self.solver == "em" and self.strings != 1:
            raise ConfigError("strings must be 1 for solver em")
        if self.weights is not None:
            if len(self.weights) != self.strings:
                raise ConfigError("weights needs one entry per string")
            if any(w < 0 for w in self.weights) or not math.isclose(sum(self.weights), 1.0):
                raise ConfigError("weights must be nonnegative and sum to 1")

    @property
    def geometry_key(self) -> tuple:
        return (self.n_side, self.n_angles, self.n_rays, self.fov_radius)


def _choice(key, value, allowed):
    if value not in allowed:
        raise ConfigError(f"{key} must be one of {', '.join(allowed)}, got {value!r}")


_FIELDS = {f.name: f for f in fields(ExperimentConfig)}
_AUTO = ("lambda0", "gamma0", "fov_radius")


def _kind(name):
    t = str(_FIELDS[name].type)
    for k in ("bool", "int", "float", "tuple"):
        if t.startswith(k):
            return k
    return "str"


def _parse_value(name, text):
    kind = _kind(name)
    try:
        if name in _AUTO and text == "auto":
            return None
        if name == "weights":
            return None if text == "uniform" else tuple(float(v) for v in text.split(","))
        if kind == "bool":
            low = text.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(text)
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
    except ValueError:
        raise ConfigError(f"invalid value for {name}: {text!r}") from None
    return text


def _format_value(name, value):
    if value is None:
        return "uniform" if name == "weights" else "auto"
    if name == "weights":
        return ",".join(repr(float(w)) for w in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_text(text: str, source: str = "<config>") -> ExperimentConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = _parse_value(key, value)
    for key in REQUIRED:
        if key not in values:
            raise ConfigError(f"{source}: missing required key {key!r}")
    return ExperimentConfig(**values)


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as err:
        raise ConfigError(f"cannot read {path}: {err.strerror}") from None
    return parse_text(text, str(path))


def emit_config(cfg: ExperimentConfig) -> str:
    """Canonical text: every key, declaration order."""
    return "".join(f"{f.name} = {_format_value(f.name, getattr(cfg, f.name))}\n"
                   for f in fields(cfg))
