"""Transmission rules for the doubly randomized protocol classes.

Binary-feedback protocols keep an estimator ``S >= 1`` of the backlog and
transmit with probability ``beta/S`` or ``1/S`` depending on a fair coin.
The ternary baselines keep a transmission probability ``p``; inside the
chain it is stored as ``S = 1/p`` so all protocols share one state layout.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Any, Optional

import numpy as np

from .model import Ternary, draw_coin  # noqa: F401  (draw_coin re-exported)

H_BUILTINS = ("sqrt", "log", "power", "linear", "constant", "tabulated")
EPS_BUILTINS = ("power", "constant", "tabulated")


def _tabulated(x, xs: tuple, ys: tuple):
    xs_a = np.asarray(xs, dtype=float)
    ys_a = np.asarray(ys, dtype=float)
    x_a = np.asarray(x, dtype=float)
    out = np.interp(x_a, xs_a, ys_a)
    # linear extrapolation past the last knot
    slope = (ys_a[-1] - ys_a[-2]) / (xs_a[-1] - xs_a[-2])
    out = np.where(x_a > xs_a[-1], ys_a[-1] + slope * (x_a - xs_a[-1]), out)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class HFunction:
    """Estimator step size ``h(S)`` for classes A2/A3.

    Builtins: ``sqrt`` (sqrt(x) - 1), ``log``, ``power`` (x**param - 1),
    ``linear`` (param * x), ``constant`` (param) and ``tabulated``.
    The last three exist mostly as counter-examples for the validator.
    """

    name: str
    param: float = 0.0
    xs: tuple = ()
    ys: tuple = ()

    def __post_init__(self):
        if self.name not in H_BUILTINS:
            raise ValueError(f"unknown h builtin {self.name!r}")
        if self.name == "power" and not 0 < self.param < 1:
            raise ValueError("power h needs exponent in (0, 1)")
        if self.name == "tabulated" and (len(self.xs) < 2 or len(self.xs) != len(self.ys)):
            raise ValueError("tabulated h needs matching xs/ys with >= 2 knots")

    def __call__(self, x):
        name = self.name
        if isinstance(x, float):
            if name == "sqrt":
                return math.sqrt(x) - 1.0
            if name == "log":
                return math.log(x)
            if name == "power":
                return x**self.param - 1.0
        if name == "sqrt":
            return np.sqrt(x) - 1.0
        if name == "log":
            return np.log(x)
        if name == "power":
            return np.power(x, self.param) - 1.0
        if name == "linear":
            return self.param * x
        if name == "constant":
            return self.param + 0.0 * x
        return _tabulated(x, self.xs, self.ys)

    def label(self) -> str:
        if self.name in ("sqrt", "log"):
            return self.name
        if self.name == "tabulated":
            return f"tabulated[{len(self.xs)}]"
        return f"{self.name}({self.param:g})"


@dataclass(frozen=True)
class EpsFunction:
    """Probability discount ``eps(S)`` for class A3, valued in (0, 1/2].

    ``power`` is ``min(1/2, x**-param)``; the cap keeps the builtin inside
    the admissible range for small ``x``.
    """

    name: str
    param: float = 0.0
    xs: tuple = ()
    ys: tuple = ()

    def __post_init__(self):
        if self.name not in EPS_BUILTINS:
            raise ValueError(f"unknown eps builtin {self.name!r}")
        if self.name == "power" and not self.param > 0:
            raise ValueError("power eps needs a positive decay exponent")

    def __call__(self, x):
        if self.name == "power":
            if isinstance(x, float):
                return min(0.5, x ** (-self.param))
            return np.minimum(0.5, np.power(x, -self.param))
        if self.name == "constant":
            return self.param + 0.0 * x
        return _tabulated(x, self.xs, self.ys)

    def label(self) -> str:
        if self.name == "tabulated":
            return f"tabulated[{len(self.xs)}]"
        return f"{self.name}({self.param:g})"


def geometric_grid(lo: float = 1.0, hi: float = 1e8, per_decade: int = 20) -> np.ndarray:
    decades = math.log10(hi / lo)
    return np.geomspace(lo, hi, int(round(decades * per_decade)) + 1)


@dataclass
class ValidityReport:
    checks: dict[str, bool]
    details: dict[str, Any] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    @property
    def failures(self) -> list[str]:
        return [k for k, ok in self.checks.items() if not ok]

    def to_dict(self) -> dict:
        return {"passed": self.passed, "checks": dict(self.checks), "details": dict(self.details)}


def _last_decade(grid: np.ndarray) -> np.ndarray:
    return grid >= grid[-1] / 10.0


def validate_h(h: HFunction, grid: Optional[np.ndarray] = None,
               ratio_threshold: float = 0.05) -> ValidityReport:
    """Numerical membership test for the step-size class.

    Limits are replaced by trend tests on the last decade of a geometric
    grid; ``h(x)/x`` must also be below ``ratio_threshold`` at the end.
    """
    x = geometric_grid() if grid is None else np.asarray(grid, dtype=float)
    if x.size < 2 or np.any(np.diff(x) <= 0):
        raise ValueError("grid must be sorted with at least two points")
    hx = np.asarray(h(x), dtype=float)
    tail = _last_decade(x)
    slack = 1e-12 * x[1:]
    ratio = hx / x
    rest = x - hx
    checks = {
        "h(1)=0": float(h(1.0)) == 0.0,
        "h>=0": bool(np.all(hx >= 0)),
        "h nondecreasing": bool(np.all(np.diff(hx) >= -slack)),
        "h unbounded": bool(np.all(np.diff(hx[tail]) > 0)),
        "x-h(x) nondecreasing": bool(np.all(np.diff(rest) >= -slack)),
        "x-h(x) unbounded": bool(np.all(np.diff(rest[tail]) > 0)),
        "h(x)/x->0": bool(ratio[-1] < ratio_threshold and np.all(np.diff(ratio[tail]) < 0)),
    }
    details = {"h": h.label(), "grid_max": float(x[-1]), "ratio_at_end": float(ratio[-1]),
               "ratio_threshold": ratio_threshold}
    return ValidityReport(checks, details)


def validate_eps(h: HFunction, eps: EpsFunction,
                 grid: Optional[np.ndarray] = None) -> ValidityReport:
    x = geometric_grid() if grid is None else np.asarray(grid, dtype=float)
    if x.size < 2 or np.any(np.diff(x) <= 0):
        raise ValueError("grid must be sorted with at least two points")
    ex = np.asarray(eps(x), dtype=float)
    growth = np.asarray(h(x), dtype=float) * ex**2
    tail = _last_decade(x)
    checks = {
        "eps in (0,1/2]": bool(np.all((ex > 0) & (ex <= 0.5))),
        "eps->0": bool(np.all(np.diff(ex[tail]) < 0)),
        "h*eps^2->inf": bool(np.all(np.diff(growth[tail]) > 0)),
    }
    details = {"h": h.label(), "eps": eps.label(), "eps_at_end": float(ex[-1]),
               "h_eps2_at_end": float(growth[-1])}
    return ValidityReport(checks, details)


# -- per-slot rules ---------------------------------------------------------

def a1_probability(S: float, I: int, beta: float) -> float:
    if S < 1:
        raise ValueError(f"estimator must be >= 1, got {S}")
    return 1.0 / S if I else beta / S


def a1_update(S: float, J: int, I: int, C: float, D: float) -> float:
    if not J:
        return S + C
    if not I:
        return S + C * D
    return max(S - C * D, 1.0)


def a2_update(S: float, J: int, I: int, C: float, h: HFunction,
              h_down: Optional[HFunction] = None) -> float:
    if not J:
        return S + C
    if not I:
        return S + h(S)
    return max(S - (h_down or h)(S), 1.0)


def a3_probability(S: float, I: int, eps: EpsFunction) -> float:
    if S < 1:
        raise ValueError(f"estimator must be >= 1, got {S}")
    return 1.0 / S if I else (1.0 - eps(S)) / S


def ternary_update(p: float, fb: Ternary, spec) -> float:
    """Classical empty/success/collision probability update, clamped."""
    if fb == Ternary.SUCCESS:
        return p
    if isinstance(spec, TernaryMultiplicative):
        p = p * spec.up if fb == Ternary.EMPTY else p * spec.down
    else:
        p = p + spec.step_up if fb == Ternary.EMPTY else p - spec.step_down
    return min(max(p, spec.p_min), spec.p_max)


# -- protocol specs ---------------------------------------------------------

def _positive(**values):
    for name, v in values.items():
        if not (v > 0 and math.isfinite(v)):
            raise ValueError(f"{name} must be positive and finite, got {v}")


class Protocol:
    feedback_kind = "binary"
    tag = ""

    @property
    def s_init(self) -> float:
        return self.S_init

    @property
    def jump_scale(self) -> float:
        return self.C

    def with_params(self, **changes) -> "Protocol":
        return replace(self, **changes)


@dataclass(frozen=True)
class A1(Protocol):
    C: float
    D: float
    beta: float
    S_init: float = 1.0
    tag = "A1"

    def __post_init__(self):
        _positive(C=self.C, D=self.D)
        if not 0 < self.beta < 1:
            raise ValueError(f"beta must lie in (0, 1), got {self.beta}")
        if self.S_init < 1:
            raise ValueError("S_init must be >= 1")

    @property
    def jump_scale(self) -> float:
        return self.C * self.D

    def probability(self, S: float, I: int) -> float:
        return a1_probability(S, I, self.beta)

    def update(self, S: float, J: int, I: int) -> float:
        return a1_update(S, J, I, self.C, self.D)


@dataclass(frozen=True)
class A2(Protocol):
    C: float
    beta: float
    h: HFunction
    S_init: float = 1.0
    h_down: Optional[HFunction] = None
    tag = "A2"

    def __post_init__(self):
        _positive(C=self.C)
        if not 0 < self.beta < 1:
            raise ValueError(f"beta must lie in (0, 1), got {self.beta}")
        if self.S_init < 1:
            raise ValueError("S_init must be >= 1")

    def probability(self, S: float, I: int) -> float:
        return a1_probability(S, I, self.beta)

    def update(self, S: float, J: int, I: int) -> float:
        return a2_update(S, J, I, self.C, self.h, self.h_down)


@dataclass(frozen=True)
class A3(Protocol):
    C: float
    h: HFunction
    eps: EpsFunction
    S_init: float = 1.0
    tag = "A3"

    def __post_init__(self):
        _positive(C=self.C)
        if self.S_init < 1:
            raise ValueError("S_init must be >= 1")

    def probability(self, S: float, I: int) -> float:
        return a3_probability(S, I, self.eps)

    def update(self, S: float, J: int, I: int) -> float:
        return a2_update(S, J, I, self.C, self.h)


@dataclass(frozen=True)
class _Ternary(Protocol):
    feedback_kind = "ternary"

    def _check_bounds(self):
        _positive(p_min=self.p_min, p_max=self.p_max, p_init=self.p_init)
        if not self.p_min <= self.p_init <= self.p_max <= 1:
            raise ValueError("need p_min <= p_init <= p_max <= 1")

    @property
    def s_init(self) -> float:
        return 1.0 / self.p_init

    @property
    def jump_scale(self) -> float:
        return 1.0

    def probability(self, S: float, I: int) -> float:
        return 1.0 / S

    def update(self, S: float, fb: Ternary, I: int) -> float:
        return 1.0 / ternary_update(1.0 / S, fb, self)


@dataclass(frozen=True)
class TernaryMultiplicative(_Ternary):
    up: float = 2.0
    down: float = 0.5
    p_min: float = 1e-9
    p_max: float = 1.0
    p_init: float = 1.0
    tag = "ternary_multiplicative"

    def __post_init__(self):
        self._check_bounds()
        if not (self.up > 1 and 0 < self.down < 1):
            raise ValueError("multiplicative baseline needs up > 1 > down > 0")


@dataclass(frozen=True)
class TernaryAdditive(_Ternary):
    step_up: float = 0.01
    step_down: float = 0.01
    p_min: float = 1e-9
    p_max: float = 1.0
    p_init: float = 1.0
    tag = "ternary_additive"

    def __post_init__(self):
        self._check_bounds()
        _positive(step_up=self.step_up, step_down=self.step_down)


PROTOCOLS = {cls.tag: cls for cls in (A1, A2, A3, TernaryMultiplicative, TernaryAdditive)}


def _fn_to_dict(fn) -> dict:
    out: dict[str, Any] = {"name": fn.name}
    if fn.name == "tabulated":
        out["xs"], out["ys"] = list(fn.xs), list(fn.ys)
    elif fn.name not in ("sqrt", "log"):
        out["param"] = fn.param
    return out


def h_from_dict(d: dict) -> HFunction:
    return HFunction(d["name"], float(d.get("param", 0.0)),
                     tuple(d.get("xs", ())), tuple(d.get("ys", ())))


def eps_from_dict(d: dict) -> EpsFunction:
    return EpsFunction(d["name"], float(d.get("param", 0.0)),
                       tuple(d.get("xs", ())), tuple(d.get("ys", ())))


def protocol_to_dict(spec: Protocol) -> dict:
    out: dict[str, Any] = {"class": spec.tag}
    for name in spec.__dataclass_fields__:
        value = getattr(spec, name)
        if value is None:
            continue
        if isinstance(value, HFunction):
            value = _fn_to_dict(value)
        elif isinstance(value, EpsFunction):
            value = _fn_to_dict(value)
        out[name] = value
    return out


def protocol_from_dict(d: dict) -> Protocol:
    d = dict(d)
    tag = d.pop("class")
    if tag not in PROTOCOLS:
        raise ValueError(f"unknown protocol class {tag!r}")
    if "h" in d:
        d["h"] = h_from_dict(d["h"])
    if d.get("h_down") is not None:
        d["h_down"] = h_from_dict(d["h_down"])
    if "eps" in d:
        d["eps"] = eps_from_dict(d["eps"])
    return PROTOCOLS[tag](**d)
