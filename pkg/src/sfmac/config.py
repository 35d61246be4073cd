"""Experiment configuration: one JSON document, schema-checked at load."""
from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

import jsonschema

from .fluid import INV_E, DerivedParams, derive_params
from .harness import RunConfig
from .model import ArrivalProcess
from .protocols import A1, Protocol, eps_from_dict, h_from_dict, protocol_from_dict

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending line when known."""


_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_int0 = {"type": "integer", "minimum": 0}
_int1 = {"type": "integer", "minimum": 1}
_fn = {
    "type": "object",
    "required": ["name"],
    "properties": {"name": {"type": "string"}, "param": _num,
                   "xs": {"type": "array", "items": _num}, "ys": {"type": "array", "items": _num}},
    "additionalProperties": False,
}
_grid = {"type": "array", "prefixItems": [_num, _num, _int0], "minItems": 3, "maxItems": 3}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "protocol": {
            "type": "object",
            "required": ["class"],
            "properties": {
                "class": {"enum": ["A1", "A2", "A3", "ternary_multiplicative", "ternary_additive"]},
                "C": _pos, "D": _pos, "beta": _pos, "S_init": {"type": "number", "minimum": 1},
                "h": _fn, "h_down": _fn, "eps": _fn,
                "up": _pos, "down": _pos, "step_up": _pos, "step_down": _pos,
                "p_min": _pos, "p_max": _pos, "p_init": _pos,
            },
            "additionalProperties": False,
        },
        "arrivals": {
            "type": "object",
            "required": ["kind"],
            "properties": {
                "kind": {"enum": ["poisson", "bernoulli_batch", "deterministic", "pareto_poisson"]},
                "rate": {"type": "number", "minimum": 0}, "k": _int0,
                "q": {"type": "number", "minimum": 0, "maximum": 1}, "c": _int0,
                "alpha": {"type": "number", "exclusiveMinimum": 1},
            },
            "additionalProperties": False,
        },
        "run": {
            "type": "object",
            "properties": {
                "horizon": _int0, "replications": _int1, "seed": _int0, "N0": _int0,
                "S0": {"type": ["number", "null"], "minimum": 1}, "stride": _int1,
                "warmup_fraction": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "K": {"oneOf": [{"type": "null"},
                                {"type": "array", "items": {"type": "number", "minimum": 1},
                                 "minItems": 2, "maxItems": 2}]},
                "memory_guard": _int1,
                "write_traces": {"type": "boolean"},
            },
            "additionalProperties": False,
        },
        "analysis": {
            "type": "object",
            "properties": {
                "lam0": _pos, "lam1": _pos, "lam": _pos,
                "beta_step": _pos, "lambda_grid": {"type": "integer", "minimum": 2},
                "lemma_grid": _int1, "scan_points": {"type": "integer", "minimum": 100},
                "residual_tol": _pos,
            },
            "additionalProperties": False,
        },
        "fluid": {
            "type": "object",
            "properties": {
                "dt": _pos, "T": _pos, "eps_stop": {"type": "number", "exclusiveMinimum": 0,
                                                     "exclusiveMaximum": 1},
                "directions": _int0, "record_every": _int1, "field_x": _grid, "field_y": _grid,
            },
            "additionalProperties": False,
        },
        "sweep": {
            "type": "object",
            "properties": {"axes": {"type": "object",
                                    "additionalProperties": {"type": "array", "items": _num}}},
            "additionalProperties": False,
        },
        "explore": {
            "type": "object",
            "properties": {
                "family": {"enum": ["A2", "A3"]},
                "selections": {"type": "array", "items": {
                    "type": "object", "required": ["h"],
                    "properties": {"h": _fn, "eps": _fn}, "additionalProperties": False}},
                "lambdas": {"type": "array", "items": _pos},
                "C": _pos, "beta": _pos, "S_init": {"type": "number", "minimum": 1},
            },
            "additionalProperties": False,
        },
        "output": {
            "type": "object",
            "properties": {"dir": {"type": "string"}},
            "additionalProperties": False,
        },
    },
}

DEFAULTS: dict = {
    "schema_version": SCHEMA_VERSION,
    # A1 without C, D, beta: constants derived from analysis.lam0/lam1
    "protocol": {"class": "A1", "S_init": 1.0},
    "arrivals": {"kind": "poisson", "rate": 0.30},
    "run": {
        "horizon": 2_000_000, "replications": 10, "seed": 0, "N0": 10_000, "S0": 10_000.0,
        "stride": 100, "warmup_fraction": 0.25, "K": None, "memory_guard": 10**9,
        "write_traces": False,
    },
    "analysis": {
        "lam0": 0.25, "lam1": 0.35, "lam": 0.30, "beta_step": 0.01, "lambda_grid": 200,
        "lemma_grid": 21, "scan_points": 100_000, "residual_tol": 1e-10,
    },
    "fluid": {
        "dt": 0.01, "T": 100.0, "eps_stop": 0.1, "directions": 20, "record_every": 10,
        "field_x": [0.0, 2.0, 21], "field_y": [0.1, 2.0, 20],
    },
    "sweep": {"axes": {"lam": [0.25, 0.30, 0.35]}},
    "explore": {
        "family": "A3",
        "selections": [{"h": {"name": "sqrt"}, "eps": {"name": "power", "param": 0.125}}],
        "lambdas": [0.30, 0.35], "C": 2.0, "beta": 0.99, "S_init": 1.0,
    },
    "output": {"dir": "out"},
}

# blocks replaced wholesale by a user value instead of merged key by key
_REPLACE = {"protocol", "arrivals", "axes", "selections"}


def default_config() -> dict:
    return copy.deepcopy(DEFAULTS)


def merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k not in _REPLACE:
            out[k] = merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _line_of(text: Optional[str], path) -> Optional[int]:
    """Best-effort line number of a JSON path inside ``text``."""
    if not text:
        return None
    pos = 0
    found = False
    for part in path:
        if isinstance(part, str):
            i = text.find(f'"{part}"', pos)
            if i < 0:
                break
            pos, found = i, True
    return text.count("\n", 0, pos) + 1 if found else None


def _fail(msg: str, text: Optional[str], path, source: str) -> ConfigError:
    line = _line_of(text, path)
    where = f"{source}:{line}" if line else source
    dotted = ".".join(str(p) for p in path) or "<root>"
    return ConfigError(f"{where}: {dotted}: {msg}")


@dataclass
class ExperimentConfig:
    raw: dict
    source: str = "<defaults>"
    text: Optional[str] = None

    @property
    def analysis(self) -> dict:
        return self.raw["analysis"]

    @property
    def fluid(self) -> dict:
        return self.raw["fluid"]

    @property
    def output_dir(self) -> Path:
        return Path(self.raw["output"]["dir"])

    def run_config(self) -> RunConfig:
        r = self.raw["run"]
        return RunConfig(
            horizon=r["horizon"], replications=r["replications"], seed=r["seed"], N0=r["N0"],
            S0=r["S0"], stride=r["stride"], warmup_fraction=r["warmup_fraction"],
            K=tuple(r["K"]) if r["K"] is not None else None, memory_guard=r["memory_guard"],
        )

    def arrivals(self) -> ArrivalProcess:
        a = dict(self.raw["arrivals"])
        return ArrivalProcess(**a)

    def derived(self) -> DerivedParams:
        an = self.analysis
        p = self.raw["protocol"]
        C = p.get("C") if p["class"] == "A1" else None
        beta = p.get("beta") if p["class"] == "A1" else None
        return derive_params(an["lam0"], an["lam1"], C=C, beta=beta,
                             beta_step=an["beta_step"], lambda_grid=an["lambda_grid"])

    def needs_derivation(self) -> bool:
        p = self.raw["protocol"]
        return p["class"] == "A1" and any(p.get(k) is None for k in ("C", "D", "beta"))

    def protocol(self, derived: Optional[DerivedParams] = None) -> Protocol:
        p = dict(self.raw["protocol"])
        if self.needs_derivation():
            d = derived or self.derived()
            return A1(C=p.get("C", d.C), D=p.get("D", d.D), beta=p.get("beta", d.beta),
                      S_init=p.get("S_init", 1.0))
        return protocol_from_dict(p)

    def explore_selections(self) -> list:
        ex = self.raw["explore"]
        out = []
        for sel in ex["selections"]:
            eps = eps_from_dict(sel["eps"]) if "eps" in sel else None
            out.append((h_from_dict(sel["h"]), eps))
        return out


def _cross_check(cfg: dict, text: Optional[str], source: str):
    an = cfg["analysis"]
    lam0, lam1 = an["lam0"], an["lam1"]
    if not lam0 < lam1:
        raise _fail(f"need lam0 < lam1, got lam0={lam0}, lam1={lam1}", text,
                    ["analysis", "lam0"], source)
    if not lam1 < INV_E:
        raise _fail(f"lam1={lam1} must be below the capacity 1/e={INV_E:.6f}", text,
                    ["analysis", "lam1"], source)
    if not an["lam"] < 1:
        raise _fail("lam must lie in (0, 1)", text, ["analysis", "lam"], source)
    p = cfg["protocol"]
    if "beta" in p and not p["beta"] < 1:
        raise _fail("beta must lie in (0, 1)", text, ["protocol", "beta"], source)
    need = {"A2": ("C", "beta", "h"), "A3": ("C", "h", "eps")}.get(p["class"], ())
    for key in need:
        if key not in p:
            raise _fail(f"class {p['class']} needs '{key}'", text, ["protocol", "class"], source)
    a = cfg["arrivals"]
    need_a = {"poisson": ("rate",), "pareto_poisson": ("rate",), "bernoulli_batch": ("k", "q"),
              "deterministic": ("c",)}[a["kind"]]
    for key in need_a:
        if key not in a:
            raise _fail(f"arrival kind {a['kind']} needs '{key}'", text, ["arrivals", "kind"],
                        source)
    fl = cfg["fluid"]
    for key in ("field_x", "field_y"):
        lo, hi, _ = fl[key]
        if hi < lo:
            raise _fail("grid needs start <= stop", text, ["fluid", key], source)
    ex = cfg["explore"]
    if ex["family"] == "A3" and any("eps" not in s for s in ex["selections"]):
        raise _fail("A3 selections need 'eps'", text, ["explore", "selections"], source)
    for path, value in _walk(cfg):
        if isinstance(value, float) and not math.isfinite(value):
            raise _fail("non-finite number", text, path, source)


def _walk(obj, path=()):
    if isinstance(obj, dict):
        for k, v in obj.items():
            yield from _walk(v, path + (k,))
    elif isinstance(obj, list):
        for i, v in enumerate(obj):
            yield from _walk(v, path + (i,))
    else:
        yield list(path), obj


def validate(user: dict, text: Optional[str] = None, source: str = "<config>") -> ExperimentConfig:
    """Merge ``user`` over the defaults and check schema plus cross-field rules."""
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(user), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        raise _fail(e.message, text, list(e.absolute_path), source)
    cfg = merge(DEFAULTS, user)
    errors = sorted(validator.iter_errors(cfg), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        raise _fail(e.message, text, list(e.absolute_path), source)
    _cross_check(cfg, text, source)
    out = ExperimentConfig(cfg, source, text)
    try:
        out.arrivals()
        if not out.needs_derivation():
            out.protocol()
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{source}: {exc}") from None
    return out


def load_config(path: Optional[str] = None, overrides: Optional[dict] = None) -> ExperimentConfig:
    text = None
    user: dict[str, Any] = {}
    source = "<command line>" if overrides else "<defaults>"
    if path is not None:
        source = str(path)
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"{source}: {exc.strerror}") from None
        try:
            user = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{source}:{exc.lineno}: invalid JSON: {exc.msg}") from None
        if not isinstance(user, dict):
            raise ConfigError(f"{source}:1: top level must be an object")
    if overrides:
        user = merge(user, overrides)
    return validate(user, text, source)
