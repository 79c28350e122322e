"""Experiment configuration: YAML/JSON loading, schema validation, and the
semantic checks that must pass before any solve starts."""
import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np
import yaml

from .errors import ConfigError, InvalidFamily
from .lattice import BackgroundForm, Mode, build_grid
from .measures import DensityKind, MeasureFamily
from .solver import SolveParams

SCENARIOS = ("Thm1Sweep", "Prop2Collapse", "SemiFlatLimit", "ContinuityPath", "SolverValidation", "EnvelopeSuite")

_number_list = {"type": "array", "items": {"type": "number"}, "minItems": 1}
_form = {
    "type": "object",
    "properties": {
        "diag": _number_list,
        "matrix": {"type": "array", "items": _number_list},
        "imag": {"type": "array", "items": _number_list},
    },
    "additionalProperties": False,
}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["scenario", "grid"],
    "additionalProperties": False,
    "properties": {
        "scenario": {"enum": list(SCENARIOS)},
        "name": {"type": "string"},
        "grid": {
            "type": "object",
            "required": ["n", "mode", "resolution"],
            "additionalProperties": False,
            "properties": {
                "n": {"enum": [1, 2]},
                "mode": {"enum": ["full", "reduced", "Full", "Reduced"]},
                "resolution": {"oneOf": [{"type": "integer", "minimum": 8},
                                         {"type": "array", "items": {"type": "integer", "minimum": 8}}]},
            },
        },
        "family": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": [k.value for k in DensityKind]},
                "alpha": {"type": "number"},
                "p": {"type": "number"},
                "eps": {"type": "number", "minimum": 0},
                "amplitude": {"type": "number"},
                "fiber_amplitude": {"type": "number"},
                "exponential": {"type": "boolean"},
                "center": _number_list,
            },
        },
        "chi": _form,
        "theta": _form,
        "lam": {"enum": [0, 1]},
        "t": {"type": "number", "exclusiveMinimum": 0},
        "kappa": {"type": "integer", "minimum": 0},
        "t_min_offset": {"type": "number", "minimum": 0},
        "schedule": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "eps": _number_list,
                "t": _number_list,
                "resolutions": {"type": "array", "items": {"type": "integer", "minimum": 8}, "minItems": 1},
            },
        },
        "solver": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "residual_tol": {"type": "number", "exclusiveMinimum": 0},
                "max_newton": {"type": "integer", "minimum": 1},
                "damping": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "linear_tol": {"type": "number", "exclusiveMinimum": 0},
                "linear_maxiter": {"type": "integer", "minimum": 1},
                "warm_start_noise": {"type": "number", "minimum": 0},
            },
        },
        "estimates": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "diameter": {"type": "boolean"},
                "stencil_radius": {"enum": [1, 2, 3]},
                "sources": {"type": "integer", "minimum": 1},
                "node_budget": {"type": "integer", "minimum": 64},
                "volume_radii": _number_list,
                "fibration": {"type": "integer", "minimum": 1},
            },
        },
        "manufactured": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "amplitude": {"type": "number"},
                "closed_form": {"type": "boolean"},
            },
        },
        "envelope": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "amplitude": {"type": "number"},
                "chi0": {"type": "number", "exclusiveMinimum": 0},
                "refine": {"type": "integer", "minimum": 2},
                "t_values": _number_list,
                "tolerance": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "tmin": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "enabled": {"type": "boolean"},
                "bisection_tol": {"type": "number", "exclusiveMinimum": 0},
                "t_max": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "thresholds": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "bound_stability": {"type": "number", "exclusiveMinimum": 0},
                "min_order": {"type": "number"},
            },
        },
        "output": {"type": "string"},
        "parallelism": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer", "minimum": 0},
    },
}


def _form_from(entry, n, default):
    if entry is None:
        return default
    if "diag" in entry:
        if len(entry["diag"]) != n:
            raise ConfigError(f"diag needs {n} entries")
        m = np.diag(np.asarray(entry["diag"], dtype=float)).astype(complex)
    elif "matrix" in entry:
        m = np.asarray(entry["matrix"], dtype=float).astype(complex)
    else:
        raise ConfigError("a form needs 'diag' or 'matrix'")
    if "imag" in entry:
        m = m + 1j * np.asarray(entry["imag"], dtype=float)
    if m.shape != (n, n):
        raise ConfigError(f"form must be {n}x{n}, got {m.shape}")
    if not np.allclose(m, m.conj().T):
        raise ConfigError("form must be Hermitian")
    return BackgroundForm(m)


def _strictly_monotone(values):
    d = np.diff(np.asarray(values, dtype=float))
    return bool(np.all(d > 0) or np.all(d < 0))


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated configuration; ``raw`` keeps the normalised key-value tree."""

    raw: dict = field(repr=False)

    @property
    def scenario(self):
        return self.raw["scenario"]

    @property
    def name(self):
        return self.raw.get("name", self.scenario)

    @property
    def n(self):
        return int(self.raw["grid"]["n"])

    @property
    def mode(self):
        return Mode.parse(self.raw["grid"]["mode"].lower())

    @property
    def resolution(self):
        return self.raw["grid"]["resolution"]

    def grid(self, resolution=None):
        return build_grid(self.n, self.mode, self.resolution if resolution is None else resolution)

    def family(self, **override):
        fam = dict(self.raw.get("family", {}))
        fam.update(override)
        if "center" in fam and fam["center"] is not None:
            fam["center"] = tuple(fam["center"])
        return MeasureFamily(**fam)

    @property
    def chi(self):
        return _form_from(self.raw.get("chi"), self.n, BackgroundForm(np.zeros((self.n, self.n))))

    @property
    def theta(self):
        return _form_from(self.raw.get("theta"), self.n, BackgroundForm.identity(self.n))

    @property
    def lam(self):
        return int(self.raw.get("lam", 1))

    @property
    def t(self):
        return float(self.raw.get("t", 1.0))

    @property
    def kappa(self):
        k = self.raw.get("kappa")
        return None if k is None else int(k)

    def schedule(self, key):
        return list(self.raw.get("schedule", {}).get(key, []))

    def solve_params(self):
        s = dict(self.raw.get("solver", {}))
        s.pop("warm_start_noise", None)
        return SolveParams(**s)

    @property
    def warm_start_noise(self):
        return float(self.raw.get("solver", {}).get("warm_start_noise", 0.0))

    def section(self, key):
        return dict(self.raw.get(key, {}))

    @property
    def bound_stability(self):
        return float(self.raw.get("thresholds", {}).get("bound_stability", 1.5))

    @property
    def parallelism(self):
        return int(self.raw.get("parallelism", 1))

    @property
    def seed(self):
        return int(self.raw.get("seed", 0))

    def with_resolution(self, resolution):
        raw = copy.deepcopy(self.raw)
        raw["grid"]["resolution"] = int(resolution)
        return validate_config(raw)

    def to_json(self):
        return json.dumps(self.raw, sort_keys=True)


_SCHEDULE_KEYS = {
    "Thm1Sweep": "eps",
    "Prop2Collapse": "t",
    "SemiFlatLimit": "t",
    "ContinuityPath": "t",
    "SolverValidation": "resolutions",
}


def validate_config(raw):
    """Schema check plus semantic rules; raises ConfigError with the reason."""
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a mapping")
    try:
        jsonschema.validate(raw, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{where}: {exc.message}") from None
    raw = copy.deepcopy(raw)
    cfg = ExperimentConfig(raw)
    try:
        cfg.grid()
    except ValueError as exc:
        raise ConfigError(f"grid: {exc}") from None
    if "family" in raw:
        try:
            cfg.family()
        except (InvalidFamily, TypeError) as exc:
            raise ConfigError(f"family: {exc}") from None
    chi, theta = cfg.chi, cfg.theta
    if float(theta.eigenvalues.min()) <= 0:
        raise ConfigError("theta must be positive definite")
    for key, values in raw.get("schedule", {}).items():
        if len(values) > 1 and not _strictly_monotone(values):
            raise ConfigError(f"schedule.{key} must be strictly monotone")
        if key in ("eps", "t") and min(values) <= 0:
            raise ConfigError(f"schedule.{key} entries must be positive")
    key = _SCHEDULE_KEYS.get(cfg.scenario)
    if key is not None and not cfg.schedule(key):
        raise ConfigError(f"{cfg.scenario} needs schedule.{key}")
    if cfg.scenario == "Thm1Sweep":
        fam = cfg.family()
        if fam.kind is not DensityKind.SINGULAR_POLE:
            raise ConfigError("Thm1Sweep needs a singular_pole family")
    if cfg.scenario in ("Prop2Collapse", "SemiFlatLimit"):
        if cfg.n != 2:
            raise ConfigError(f"{cfg.scenario} needs n = 2")
        if not chi.is_semipositive(1e-12):
            raise ConfigError(f"{cfg.scenario} needs a semipositive chi")
    fib = raw.get("estimates", {}).get("fibration")
    if fib is not None and not 0 < fib < cfg.n:
        raise ConfigError("estimates.fibration must split n")
    return cfg


def load_config(path):
    """Read a YAML or JSON file and validate it."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}") from None
    return validate_config(raw)
