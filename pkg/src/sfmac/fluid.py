"""Fluid-limit numerics for the class-A1 protocol.

With ``z = N/S`` the limiting drifts are

    j1(z) = (beta z / 2) exp(-beta z),   j2(z) = (z / 2) exp(-z)
    a(z)  = lam - j1 - j2                 (backlog)
    b(z)  = C (1 - j) + C D (j1 - j2)     (estimator)
    r(z)  = a(z) - z b(z)                 (dz/dt = r(z) / S)

This module finds the roots of ``a``, ``b`` and ``r``, checks their
ordering, derives protocol constants for a target band of input rates,
and integrates the fluid ODE.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

INV_E = math.exp(-1.0)
_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


class NoBracketError(ValueError):
    """Raised when a root search has no sign change to work with."""


class InfeasibleBandError(ValueError):
    pass


class ClampWarning(UserWarning):
    """The closed-form estimator drift ignores the clamp at S = 1."""


@dataclass(frozen=True)
class FluidParams:
    lam: float
    beta: float
    C: float
    D: float

    def __post_init__(self):
        if not 0 < self.lam < 1:
            raise ValueError(f"lam must lie in (0, 1), got {self.lam}")
        if not 0 < self.beta <= 1:
            raise ValueError(f"beta must lie in (0, 1], got {self.beta}")
        if not (self.C > 0 and self.D > 0):
            raise ValueError("C and D must be positive")


# -- auxiliary functions ------------------------------------------------------

def j1(z, beta):
    return beta * z / 2.0 * np.exp(-beta * z)


def j2(z):
    return z / 2.0 * np.exp(-z)


def j(z, beta):
    return j1(z, beta) + j2(z)


def j_prime(z, beta):
    return (beta / 2.0 * np.exp(-beta * z) * (1.0 - beta * z)
            + 0.5 * np.exp(-z) * (1.0 - z))


def a(z, lam, beta):
    return lam - j(z, beta)


def b1(z, beta, D):
    """Estimator drift in units of ``C``."""
    u, v = j1(z, beta), j2(z)
    return 1.0 - (u + v) + D * (u - v)


def b(z, beta, C, D):
    return C * b1(z, beta, D)


def r(z, params: FluidParams):
    return a(z, params.lam, params.beta) - z * b(z, params.beta, params.C, params.D)


def field_at(z, params: FluidParams):
    """``(a(z), b(z))`` sharing one evaluation of the exponentials."""
    u, v = j1(z, params.beta), j2(z)
    jz = u + v
    return params.lam - jz, params.C * (1.0 - jz + params.D * (u - v))


# -- exact one-step drifts --------------------------------------------------

def _success_terms(m: int, s: float, beta: float) -> tuple[float, float]:
    """``P(J=1, I=0)`` and ``P(J=1, I=1)`` given ``N = m``, ``S = s``."""
    if s < 1:
        raise ValueError(f"estimator must be >= 1, got {s}")
    if m < 0:
        raise ValueError("backlog must be non-negative")
    if m == 0:
        return 0.0, 0.0
    up = m * beta / (2.0 * s) * math.pow(1.0 - beta / s, m - 1)
    down = m / (2.0 * s) * math.pow(1.0 - 1.0 / s, m - 1)
    return up, down


def exact_drift_j(m: int, s: float, beta: float) -> float:
    """Exact ``E[J | N=m, S=s]`` for class A1."""
    up, down = _success_terms(m, s, beta)
    return up + down


def exact_drift_a(m: int, s: float, lam: float, beta: float) -> float:
    return lam - exact_drift_j(m, s, beta)


def clamp_active(s: float, C: float, D: float) -> bool:
    return s - C * D < 1.0


def exact_drift_b(m: int, s: float, beta: float, C: float, D: float) -> float:
    """Closed-form ``E[S' - S | N=m, S=s]``.

    Exact when ``s >= C D + 1``.  Below that the clamp ``max(S - CD, 1)``
    is active and the value is only an upper bound; a
    :class:`ClampWarning` is issued.
    """
    up, down = _success_terms(m, s, beta)
    if clamp_active(s, C, D):
        warnings.warn(f"s={s} < CD+1={C * D + 1}: clamp active, drift is an upper bound",
                      ClampWarning, stacklevel=2)
    return C * (1.0 - up - down) + C * D * (up - down)


# -- scalar search helpers --------------------------------------------------

@dataclass
class BisectInfo:
    lo: float
    hi: float
    iterations: int


def bisect(f: Callable[[float], float], lo: float, hi: float,
           xtol: float = 1e-15, max_iter: int = 300) -> tuple[float, BisectInfo]:
    flo, fhi = f(lo), f(hi)
    if flo == 0:
        return lo, BisectInfo(lo, lo, 0)
    if fhi == 0:
        return hi, BisectInfo(hi, hi, 0)
    if (flo > 0) == (fhi > 0):
        raise NoBracketError(f"no sign change on [{lo}, {hi}]: f={flo}, {fhi}")
    it = 0
    while it < max_iter and hi - lo > xtol * max(1.0, abs(lo)):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        fm = f(mid)
        it += 1
        if fm == 0:
            return mid, BisectInfo(mid, mid, it)
        if (fm > 0) == (flo > 0):
            lo, flo = mid, fm
        else:
            hi = mid
    root = lo if abs(flo) <= abs(f(hi)) else hi
    return root, BisectInfo(lo, hi, it)


def bisect_vec(f: Callable[[np.ndarray], np.ndarray], lo, hi, iterations: int = 64) -> np.ndarray:
    """Elementwise bisection; ``f(lo)`` and ``f(hi)`` must differ in sign."""
    lo = np.array(lo, dtype=float)
    hi = np.array(hi, dtype=float)
    flo = f(lo)
    if np.any(np.sign(flo) == np.sign(f(hi))):
        raise NoBracketError("bisect_vec: some brackets have no sign change")
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        fm = f(mid)
        same = np.sign(fm) == np.sign(flo)
        lo = np.where(same, mid, lo)
        flo = np.where(same, fm, flo)
        hi = np.where(same, hi, mid)
    return 0.5 * (lo + hi)


def golden_min(f: Callable[[float], float], lo: float, hi: float,
               tol: float = 1e-10) -> tuple[float, float]:
    """Golden-section minimum of a unimodal ``f`` on ``[lo, hi]``."""
    x1 = hi - _GOLDEN * (hi - lo)
    x2 = lo + _GOLDEN * (hi - lo)
    f1, f2 = f(x1), f(x2)
    while hi - lo > tol:
        if f1 <= f2:
            hi, x2, f2 = x2, x1, f1
            x1 = hi - _GOLDEN * (hi - lo)
            f1 = f(x1)
        else:
            lo, x1, f1 = x1, x2, f2
            x2 = lo + _GOLDEN * (hi - lo)
            f2 = f(x2)
    x = 0.5 * (lo + hi)
    return x, f(x)


def grid_min(f, lo: float, hi: float, points: int = 2001, tol: float = 1e-10) -> tuple[float, float]:
    """Dense-grid minimum refined by golden section around the best node."""
    zs = np.linspace(lo, hi, points)
    vals = f(zs)
    i = int(np.argmin(vals))
    left, right = zs[max(i - 1, 0)], zs[min(i + 1, points - 1)]
    x, fx = golden_min(lambda t: float(f(t)), float(left), float(right), tol)
    if vals[i] < fx:
        return float(zs[i]), float(vals[i])
    return x, fx


def max_j(beta: float = 1.0, z_hi: float = 10.0) -> tuple[float, float]:
    """Location and value of ``max_z j(z, beta)``.

    Golden section brackets the peak; bisection on the analytic derivative
    pins the location to machine precision.
    """
    zg, _ = grid_min(lambda z: -j(z, beta), 0.0, z_hi)
    step = z_hi / 2000
    lo, hi = max(zg - step, 0.0), zg + step
    if j_prime(lo, beta) > 0 > j_prime(hi, beta):
        zg, _ = bisect(lambda z: float(j_prime(z, beta)), lo, hi)
    return zg, float(j(zg, beta))


def compute_m_beta(beta: float, points: int = 2001, tol: float = 1e-8) -> float:
    """``min over z in [1, 1/beta]`` of ``j(z, beta)``."""
    if not 0 < beta <= 1:
        raise ValueError("beta must lie in (0, 1]")
    if beta == 1:
        return float(j(1.0, 1.0))
    _, val = grid_min(lambda z: j(z, beta), 1.0, 1.0 / beta, points, tol)
    return min(val, float(j(1.0, beta)), float(j(1.0 / beta, beta)))


# -- roots ------------------------------------------------------------------

@dataclass
class RootPair:
    lo: float
    hi: float
    degenerate: bool = False
    residuals: tuple = (0.0, 0.0)
    iterations: tuple = (0, 0)

    def __iter__(self):
        yield self.lo
        yield self.hi


def find_roots_a(lam: float, beta: float, degenerate_tol: float = 1e-12) -> RootPair:
    """The two roots ``z1 < 1 < z2`` of ``a(z) = lam - j(z) = 0``.

    Needs ``lam < m(beta)``.  When ``lam`` sits at the maximum of ``j`` the
    double root is returned with ``degenerate=True``.
    """
    f = lambda z: lam - float(j(z, beta))  # noqa: E731
    if not lam < compute_m_beta(beta):
        zmax, jmax = max_j(beta)
        if abs(jmax - lam) <= degenerate_tol:
            return RootPair(zmax, zmax, True, (f(zmax), f(zmax)))
        raise NoBracketError(f"lam={lam} >= m(beta)={compute_m_beta(beta)}: no two-root bracket")
    z1, i1 = bisect(f, 1e-300, 1.0)
    hi = 2.0 / beta
    while f(hi) <= 0:
        hi *= 2.0
        if hi > 1e6:
            raise NoBracketError("upper root of a(z) not bracketed")
    z2, i2 = bisect(f, 1.0 / beta, hi)
    return RootPair(z1, z2, False, (f(z1), f(z2)), (i1.iterations, i2.iterations))


def crossing_point(beta: float) -> float:
    """Where ``j1 - j2`` changes sign: ``-log(beta) / (1 - beta)``."""
    if beta >= 1:
        return math.inf
    return -math.log(beta) / (1.0 - beta)


def find_roots_b(beta: float, D: float, points: int = 4001) -> RootPair:
    """Roots ``t1 < t2`` of ``b1(z) = 1 - j + D (j1 - j2)``."""
    zc = crossing_point(beta)
    if not math.isfinite(zc):
        raise NoBracketError("beta = 1: b is strictly positive")
    f = lambda z: float(b1(z, beta, D))  # noqa: E731
    zmin, bmin = grid_min(lambda z: b1(z, beta, D), 0.0, zc, points)
    if bmin >= 0:
        raise NoBracketError(f"b1 >= 0 everywhere (min {bmin} at z={zmin}); D={D} too small")
    t1, i1 = bisect(f, 0.0, zmin)
    t2, i2 = bisect(f, zmin, zc)
    return RootPair(t1, t2, False, (f(t1), f(t2)), (i1.iterations, i2.iterations))


@dataclass
class RRoots:
    roots: list
    positive_before_z1: bool
    negative_after_t2: bool
    outside: list

    @property
    def ok(self) -> bool:
        return self.positive_before_z1 and self.negative_after_t2 and not self.outside


def find_roots_r(params: FluidParams, z1: float, t2: float, z2: float,
                 points: int = 10_000, z_max: Optional[float] = None) -> RRoots:
    """Sign scan of ``r`` on ``(0, 2 z2]`` plus bisection per sign change."""
    z_max = 2.0 * z2 if z_max is None else z_max
    zs = np.linspace(0.0, z_max, points + 1)[1:]
    rv = r(zs, params)
    sign = np.sign(rv)
    roots = []
    f = lambda z: float(r(z, params))  # noqa: E731
    for i in np.nonzero(sign[:-1] * sign[1:] < 0)[0]:
        root, _ = bisect(f, float(zs[i]), float(zs[i + 1]))
        roots.append(root)
    roots.extend(float(zs[i]) for i in np.nonzero(rv == 0)[0])
    roots.sort()
    before = zs <= z1
    after = zs >= t2
    return RRoots(
        roots=roots,
        positive_before_z1=bool(np.all(rv[before] > 0)),
        negative_after_t2=bool(np.all(rv[after] < 0)),
        outside=[z for z in roots if not z1 < z < t2],
    )


def sign_changes(values: np.ndarray) -> int:
    s = np.sign(values)
    s = s[s != 0]
    return int(np.count_nonzero(s[1:] != s[:-1]))


# -- lemma check ------------------------------------------------------------

@dataclass
class LemmaReport:
    params: FluidParams
    checks: dict
    z1: Optional[float] = None
    z2: Optional[float] = None
    t1: Optional[float] = None
    t2: Optional[float] = None
    r_roots: list = field(default_factory=list)
    residuals: dict = field(default_factory=dict)
    scan: dict = field(default_factory=dict)
    in_band: Optional[bool] = None
    notes: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    @property
    def failures(self) -> list:
        return [k for k, ok in self.checks.items() if not ok]

    def to_dict(self) -> dict:
        out = asdict(self)
        out["passed"] = self.passed
        return out


def verify_lemma(params: FluidParams, band: Optional[tuple] = None,
                 scan_points: int = 100_000, residual_tol: float = 1e-10) -> LemmaReport:
    """Check the root structure of ``a``, ``b`` and ``r`` for one parameter set.

    Root counts come from an exhaustive sign scan; the roots themselves
    from bisection.  Failures are reported, never raised.
    """
    lam, beta, D = params.lam, params.beta, params.D
    checks = {"a_two_roots": False, "b_two_roots": False, "ordering": False,
              "r_sign_structure": False}
    rep = LemmaReport(params, checks)
    if band is not None:
        rep.in_band = band[0] <= lam <= band[1]
        if not rep.in_band:
            rep.notes.append(f"lam={lam} outside the band {tuple(band)} the constants were derived for")

    try:
        ra = find_roots_a(lam, beta)
        rep.z1, rep.z2 = ra.lo, ra.hi
        rep.residuals["a"] = [abs(x) for x in ra.residuals]
        if ra.degenerate:
            rep.notes.append("double root of a(z): lam at the maximum of j")
    except NoBracketError as exc:
        rep.notes.append(f"a: {exc}")
    try:
        rb = find_roots_b(beta, D)
        rep.t1, rep.t2 = rb.lo, rb.hi
        rep.residuals["b"] = [abs(params.C * x) for x in rb.residuals]
    except NoBracketError as exc:
        rep.notes.append(f"b: {exc}")

    z_hi = max(4.0 * (rep.z2 or 1.0), 50.0)
    zs = np.linspace(0.0, z_hi, scan_points + 1)[1:]
    a_changes = sign_changes(a(zs, lam, beta))
    b_changes = sign_changes(b1(zs, beta, D))
    rep.scan = {"z_max": z_hi, "points": scan_points,
                "a_sign_changes": a_changes, "b_sign_changes": b_changes}

    if rep.z1 is not None:
        checks["a_two_roots"] = (a_changes == 2 and not ra.degenerate
                                 and max(rep.residuals["a"]) < residual_tol)
    if rep.t1 is not None:
        checks["b_two_roots"] = b_changes == 2 and max(rep.residuals["b"]) < residual_tol
    if checks["a_two_roots"] and checks["b_two_roots"]:
        checks["ordering"] = 0 < rep.t1 < rep.z1 < rep.t2 < rep.z2
    if checks["ordering"]:
        rr = find_roots_r(params, rep.z1, rep.t2, rep.z2)
        rep.r_roots = rr.roots
        rep.residuals["r"] = [abs(float(r(z, params))) for z in rr.roots]
        checks["r_sign_structure"] = rr.ok and bool(rr.roots)
        if rr.outside:
            rep.notes.append(f"r has roots outside (z1, t2): {rr.outside}")
    return rep


# -- parameter derivation ---------------------------------------------------

@dataclass
class DerivedParams:
    lam0: float
    lam1: float
    C1: float
    C: float
    beta1: float
    beta: float
    D0: float
    D1: float
    D: float
    margin: float
    m_beta1: float
    beta_z2_min: float
    notes: list = field(default_factory=list)

    def fluid(self, lam: float) -> FluidParams:
        return FluidParams(lam, self.beta, self.C, self.D)

    def protocol(self, S_init: float = 1.0):
        from .protocols import A1

        return A1(C=self.C, D=self.D, beta=self.beta, S_init=S_init)

    def to_dict(self) -> dict:
        return asdict(self)


def lower_C(lam1: float) -> float:
    """Smallest admissible estimator increment for rates up to ``lam1``."""
    return (lam1 + 1.0) / (1.0 - INV_E)


def beta_grid(step: float = 0.01, lo: float = 0.5) -> np.ndarray:
    """Uniform grid on ``[lo, 1)`` densified towards 1."""
    uniform = np.arange(lo, 1.0 - step / 2, step)
    tail = 1.0 - 10.0 ** (-np.arange(2.0, 8.01, 0.25))
    return np.unique(np.round(np.concatenate([uniform, tail]), 12))


def _lower_roots(lams: np.ndarray, beta: float) -> np.ndarray:
    return bisect_vec(lambda z: lams - j(z, beta), np.full_like(lams, 1e-300), np.ones_like(lams))


def _upper_roots(lams: np.ndarray, beta: float) -> np.ndarray:
    hi = np.full_like(lams, 2.0 / beta)
    while np.any(lams - j(hi, beta) <= 0):
        hi = np.where(lams - j(hi, beta) <= 0, hi * 2.0, hi)
    return bisect_vec(lambda z: lams - j(z, beta), np.full_like(lams, 1.0 / beta), hi)


def _beta_admissible(beta: float, lam1: float, margin: float, lam_grid: np.ndarray) -> tuple[bool, float, float]:
    m = compute_m_beta(beta)
    if m < lam1 + margin:
        return False, m, math.nan
    bz2 = float(np.min(beta * _upper_roots(lam_grid, beta)))
    return bz2 > 1.0, m, bz2


def _t1(beta: float, D: float) -> Optional[float]:
    try:
        return find_roots_b(beta, D).lo
    except NoBracketError:
        return None


def derive_params(lam0: float, lam1: float, *, C: Optional[float] = None,
                  beta: Optional[float] = None, beta_step: float = 0.01,
                  lambda_grid: int = 200, margin: Optional[float] = None) -> DerivedParams:
    """Protocol constants that make the fluid limit stable on ``[lam0, lam1]``.

    * ``C = max(C1, C)`` with ``C1 = (lam1 + 1) / (1 - 1/e)``;
    * ``beta1`` is the smallest grid value with ``m(beta) >= lam1 + margin``
      and ``beta z2(beta, lam) > 1`` for every grid ``lam`` in ``(0, lam1]``;
      the chosen ``beta`` defaults to the next grid value above ``beta1``;
    * ``D0 = 2 / min over lam in [lam0, lam1] of (j2(z1) - j1(z1))``;
    * ``D1`` is the smallest ``D`` with ``t1 <= lam0 / (2 (C + 1))``;
    * ``D = max(D0, D1)``.
    """
    if not 0 < lam0 < lam1:
        raise InfeasibleBandError(f"need 0 < lam0 < lam1, got ({lam0}, {lam1})")
    if lam1 >= INV_E:
        raise InfeasibleBandError(f"lam1={lam1} is not below the capacity 1/e")
    margin = (INV_E - lam1) / 4.0 if margin is None else margin
    notes = []

    C1 = lower_C(lam1)
    C_used = C1 if C is None else max(C1, C)

    lam_upto = np.linspace(lam1 / lambda_grid, lam1, lambda_grid)
    grid = beta_grid(beta_step)
    beta1 = None
    for k, bt in enumerate(grid):
        ok, m_b1, bz2 = _beta_admissible(float(bt), lam1, margin, lam_upto)
        if ok:
            beta1 = float(bt)
            break
    if beta1 is None:
        raise InfeasibleBandError(f"no grid beta < 1 satisfies m(beta) >= {lam1 + margin}")

    if beta is None:
        chosen = float(grid[k + 1]) if k + 1 < len(grid) else 0.5 * (beta1 + 1.0)
        ok, _, bz2 = _beta_admissible(chosen, lam1, margin, lam_upto)
        if not ok:
            raise InfeasibleBandError(f"grid beta {chosen} above beta1 is not admissible")
    else:
        chosen = float(beta)
        ok, _, bz2 = _beta_admissible(chosen, lam1, margin, lam_upto)
        if chosen <= beta1 or not ok:
            notes.append(f"user beta={chosen} is not in the admissible range (beta1={beta1}, 1)")

    lam_band = np.linspace(lam0, lam1, lambda_grid)
    z1s = _lower_roots(lam_band, chosen)
    gap = float(np.min(j2(z1s) - j1(z1s, chosen)))
    if gap <= 0:
        raise InfeasibleBandError("j2(z1) <= j1(z1) somewhere in the band")
    D0 = 2.0 / gap

    target = lam0 / (2.0 * (C_used + 1.0))
    D_hi = 1.0
    while True:
        t1 = _t1(chosen, D_hi)
        if t1 is not None and t1 <= target:
            break
        D_hi *= 2.0
        if D_hi > 1e15:
            raise InfeasibleBandError("no D brings t1 below the target")
    D_lo = D_hi / 2.0
    while D_hi - D_lo > 1e-9 * D_hi:
        mid = 0.5 * (D_lo + D_hi)
        t1 = _t1(chosen, mid)
        if t1 is not None and t1 <= target:
            D_hi = mid
        else:
            D_lo = mid
    D1 = D_hi

    return DerivedParams(lam0=lam0, lam1=lam1, C1=C1, C=C_used, beta1=beta1, beta=chosen,
                         D0=D0, D1=D1, D=max(D0, D1), margin=margin, m_beta1=m_b1,
                         beta_z2_min=bz2, notes=notes)


# -- fluid trajectories -----------------------------------------------------

CONVERGED = "converged"
HORIZON = "horizon_exceeded"
DIVERGED = "diverged"


@dataclass
class FluidTrajectory:
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    status: str
    t_end: float
    t_eps: Optional[float] = None

    @property
    def converged(self) -> bool:
        return self.status == CONVERGED


def _scalar_field(params: FluidParams):
    lam, beta, C, D = params.lam, params.beta, params.C, params.D
    exp = math.exp

    def fld(z: float) -> tuple[float, float]:
        u = 0.5 * beta * z * exp(-beta * z)
        v = 0.5 * z * exp(-z)
        jz = u + v
        return lam - jz, C * (1.0 - jz + D * (u - v))

    return fld


def integrate_fluid(x0: float, y0: float, params: FluidParams, dt: float = 0.01,
                    T: float = 100.0, eps_stop: float = 0.1, guard: float = 5.0,
                    y_floor: float = 1e-6, drain_tol: float = 1e-3,
                    record_every: int = 1, tol: float = 1e-11) -> FluidTrajectory:
    """RK4 integration of ``x' = a(x/y)``, ``y' = b(x/y)``.

    Integration stops when ``x + y`` drops below ``drain_tol`` times the
    initial mass (the origin is reached), exceeds ``guard`` times the
    initial mass (``diverged``), or at ``T``.  A trajectory that ends at or
    below ``(1 - eps_stop)`` times its initial mass is ``converged``;
    ``t_eps`` is the first time it got there.  ``y`` is floored at
    ``y_floor`` where ``z = x/y`` is singular.

    ``dt`` is the largest step.  The field is stiff near ``y = 0`` (its
    Jacobian has the eigenvalue ``(a'(z) - z b'(z)) / y``), so each step is
    checked by step doubling: a full RK4 step is compared with two half
    steps and the step shrinks until the difference, scaled by the initial
    mass, is below ``tol``.  The two half steps are kept.
    """
    if x0 < 0 or y0 <= 0:
        raise ValueError("need x0 >= 0 and y0 > 0")
    if dt <= 0 or T <= 0:
        raise ValueError("dt and T must be positive")
    mass0 = x0 + y0
    low, high, drained = (1.0 - eps_stop) * mass0, guard * mass0, drain_tol * mass0
    err_tol = tol * mass0
    fld = _scalar_field(params)

    def rk4(x, y, h):
        k1 = fld(x / max(y, y_floor))
        x2, y2 = x + 0.5 * h * k1[0], y + 0.5 * h * k1[1]
        k2 = fld(max(x2, 0.0) / max(y2, y_floor))
        x3, y3 = x + 0.5 * h * k2[0], y + 0.5 * h * k2[1]
        k3 = fld(max(x3, 0.0) / max(y3, y_floor))
        x4, y4 = x + h * k3[0], y + h * k3[1]
        k4 = fld(max(x4, 0.0) / max(y4, y_floor))
        return (max(x + h / 6.0 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0]), 0.0),
                max(y + h / 6.0 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1]), y_floor))

    ts, xs, ys = [0.0], [x0], [y0]
    x, y, t = float(x0), float(y0), 0.0
    t_eps = None
    h_try = dt
    k = 0
    end = T * (1.0 - 1e-12)
    while t < end:
        h = min(h_try, dt, T - t)
        while True:
            fx, fy = rk4(x, y, h)
            hx, hy = rk4(x, y, 0.5 * h)
            hx, hy = rk4(hx, hy, 0.5 * h)
            err = max(abs(fx - hx), abs(fy - hy)) / 15.0
            if err <= err_tol or h < 1e-14 * max(T, 1.0):
                break
            h *= max(0.1, 0.9 * (err_tol / err) ** 0.2)
        x, y, t = hx, hy, t + h
        h_try = h * (4.0 if err == 0 else min(4.0, 0.9 * (err_tol / err) ** 0.2))
        k += 1
        mass = x + y
        if t_eps is None and mass <= low:
            t_eps = t
        stop = mass <= drained or mass >= high
        if stop or k % record_every == 0 or t >= end:
            ts.append(t)
            xs.append(x)
            ys.append(y)
        if stop:
            break
    mass = x + y
    if mass >= high:
        status = DIVERGED
    elif mass <= low:
        status = CONVERGED
    else:
        status = HORIZON
    return FluidTrajectory(np.array(ts), np.array(xs), np.array(ys), status, t, t_eps)


def simplex_directions(count: int = 20) -> list[tuple[float, float]]:
    """``count`` starting points ``(x0, y0)`` on ``x + y = 1`` with ``y0 > 0``."""
    return [(i / count, 1.0 - i / count) for i in range(count)]


def drift_field(params: FluidParams, xs, ys) -> np.ndarray:
    """Rows ``(x, y, a, b)`` over the grid ``xs`` x ``ys`` (``y > 0``)."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if xs.size == 0 or ys.size == 0:
        raise ValueError("empty drift-field grid")
    if np.any(ys <= 0) or np.any(xs < 0):
        raise ValueError("drift field needs x >= 0 and y > 0")
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    A, B = field_at(X / Y, params)
    out = np.empty(X.size, dtype=[("x", "f8"), ("y", "f8"), ("a", "f8"), ("b", "f8")])
    out["x"], out["y"], out["a"], out["b"] = X.ravel(), Y.ravel(), A.ravel(), B.ravel()
    return out
