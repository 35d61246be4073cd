"""Monte Carlo experiments on the backlog/estimator chain.

Replicated runs, an empirical stable/transient/inconclusive classifier,
throughput and recurrence statistics, and parameter sweeps.  Every
replication owns a stream derived from ``(seed, cell, replication)``, so
results never depend on how work is scheduled across processes.
"""
from __future__ import annotations

import itertools
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Optional, Sequence

import numpy as np
from scipy import stats

from .fluid import INV_E
from .model import ArrivalProcess, Ternary, binomial_from_uniform
from .protocols import A2, A3, EpsFunction, HFunction, Protocol, validate_eps, validate_h
from .rng import RngStream, cell_stream_id

logger = logging.getLogger(__name__)

RECORD_DTYPE = np.dtype([
    ("n", "i8"), ("N", "i8"), ("S", "f8"), ("p", "f8"), ("B", "i8"), ("J", "i1"),
    ("successes", "i8"), ("arrivals", "i8"),
])

STABLE = "stable"
TRANSIENT = "transient"
INCONCLUSIVE = "inconclusive"

# default compact set: max(100, K_SCALE * largest estimator jump)
K_SCALE = 50.0


@dataclass(frozen=True)
class RunConfig:
    horizon: int
    replications: int = 1
    seed: int = 0
    N0: int = 0
    S0: Optional[float] = None
    stride: int = 1
    warmup_fraction: float = 0.25
    K: Optional[tuple] = None
    memory_guard: int = 10**9

    def __post_init__(self):
        if self.horizon < 0 or self.replications < 1 or self.stride < 1:
            raise ValueError("need horizon >= 0, replications >= 1, stride >= 1")
        if self.N0 < 0 or (self.S0 is not None and self.S0 < 1):
            raise ValueError("need N0 >= 0 and S0 >= 1")
        if not 0 <= self.warmup_fraction < 1:
            raise ValueError("warmup_fraction must lie in [0, 1)")
        if self.K is not None and (len(self.K) != 2 or min(self.K) < 1):
            raise ValueError("K must be a pair (N*, S*) with both >= 1")

    @property
    def warmup(self) -> int:
        return int(self.warmup_fraction * self.horizon)


def compact_set(spec: Protocol, cfg: RunConfig) -> tuple[float, float]:
    """Thresholds ``(N*, S*)`` of the recurrence set ``{N <= N*, S <= S*}``."""
    if cfg.K is not None:
        return float(cfg.K[0]), float(cfg.K[1])
    size = max(100.0, K_SCALE * spec.jump_scale)
    return size, size


@dataclass
class TraceSummary:
    slots: int
    successes: int
    arrivals: int
    max_N: int
    N0: int
    S0: float
    N_end: int
    S_end: float
    diverged: bool = False

    @property
    def conserved(self) -> bool:
        return self.N_end == self.N0 + self.arrivals - self.successes


@dataclass
class Trace:
    records: np.ndarray
    summary: TraceSummary
    stride: int
    seed: int
    stream_id: int

    def __len__(self) -> int:
        return len(self.records)


def simulate_chain(spec: Protocol, proc: ArrivalProcess, horizon: int, N0: int, S0: float,
                   rng: RngStream, stride: int = 1, memory_guard: int = 10**9,
                   chunk: int = 65536) -> Trace:
    """Bulk version of repeated :func:`sfmac.model.step` calls.

    Draws come in blocks from the same three lanes in the same per-lane
    order, so the path equals the one produced slot by slot.
    """
    from math import exp, log1p

    prob = spec.probability
    update = spec.update
    if spec.feedback_kind == "binary":
        signal = (0, 1, 0)
    else:
        signal = (Ternary.EMPTY, Ternary.SUCCESS, Ternary.COLLISION)
    N, S = int(N0), float(S0)
    n = 0
    succ = arr = 0
    max_N = N
    records = []
    diverged = False
    while n < horizon and not diverged:
        size = min(chunk, horizon - n)
        coins = (rng.coin.random(size) < 0.5).tolist()
        us = rng.channel.random(size).tolist()
        xis = proc.draw_block(rng.arrivals, size)
        for i in range(size):
            I = 1 if coins[i] else 0
            p = prob(S, I)
            u = us[i]
            if N == 0:
                out = 0
            elif p >= 1.0:
                out = 1 if N == 1 else 2
            else:
                q = exp((N - 1) * log1p(-p))
                p0 = q * (1.0 - p)
                out = 0 if u < p0 else (1 if u < p0 + N * p * q else 2)
            J = 1 if out == 1 else 0
            if n % stride == 0:
                records.append((n, N, S, p, binomial_from_uniform(u, N, p), J, succ, arr))
            S = update(S, signal[out], I)
            xi = xis[i]
            N += xi - J
            succ += J
            arr += xi
            n += 1
            if N > max_N:
                max_N = N
                if N > memory_guard:
                    diverged = True
                    break
    rec = np.array(records, dtype=RECORD_DTYPE) if records else np.zeros(0, RECORD_DTYPE)
    summary = TraceSummary(n, succ, arr, max_N, int(N0), float(S0), N, S, diverged)
    return Trace(rec, summary, stride, rng.seed, rng.stream_id)


def run(spec: Protocol, proc: ArrivalProcess, cfg: RunConfig, stream=0) -> Trace:
    """One replication of ``cfg.horizon`` slots.

    ``stream`` is an :class:`RngStream` or a stream id combined with
    ``cfg.seed``.
    """
    rng = stream if isinstance(stream, RngStream) else RngStream(cfg.seed, stream)
    S0 = spec.s_init if cfg.S0 is None else cfg.S0
    trace = simulate_chain(spec, proc, cfg.horizon, cfg.N0, S0, rng, cfg.stride, cfg.memory_guard)
    if trace.summary.diverged:
        logger.warning("run aborted at slot %d: backlog above %d", trace.summary.slots,
                       cfg.memory_guard)
    return trace


def estimate_throughput(trace: Trace, warmup: int = 0) -> float:
    """Successes per slot after ``warmup`` slots."""
    slots = trace.summary.slots
    if slots == 0:
        return 0.0
    if not 0 <= warmup < slots:
        raise ValueError(f"warmup {warmup} must lie in [0, {slots})")
    rec = trace.records
    idx = int(np.searchsorted(rec["n"], warmup))
    if idx == len(rec):
        raise ValueError("no record at or after the warmup slot; lower the stride")
    start = int(rec["n"][idx])
    return (trace.summary.successes - int(rec["successes"][idx])) / (slots - start)


@dataclass
class Recurrence:
    hits: np.ndarray
    returns: np.ndarray

    @property
    def count(self) -> int:
        return int(self.hits.size)

    @property
    def mean_return(self) -> float:
        return float(self.returns.mean()) if self.returns.size else math.nan

    @property
    def max_return(self) -> float:
        return float(self.returns.max()) if self.returns.size else math.nan


def recurrence_times(trace: Trace, K: tuple, start: int = 1) -> Recurrence:
    """Slots ``n >= start`` at which the recorded state lies in ``K``.

    Resolution is the recording stride; ``returns`` are the gaps between
    successive visits.
    """
    rec = trace.records
    N_max, S_max = K
    mask = (rec["n"] >= start) & (rec["N"] <= N_max) & (rec["S"] <= S_max)
    hits = rec["n"][mask]
    return Recurrence(hits, np.diff(hits))


def ols_slope(n: np.ndarray, y: np.ndarray) -> float:
    if n.size < 2:
        return math.nan
    n = n.astype(float)
    y = y.astype(float)
    dn = n - n.mean()
    return float(np.dot(dn, y - y.mean()) / np.dot(dn, dn))


@dataclass
class StabilityVerdict:
    verdict: str
    slope: float
    slope_ci_lo: float
    slope_ci_hi: float
    slope_min: float
    recurrences: int
    recurrence_rate: float
    mean_return: float
    throughput: float
    replications: int
    K: tuple
    slopes: list = field(default_factory=list)
    throughputs: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def classify_stability(traces: Sequence[Trace], cfg: RunConfig, arrival_rate: float,
                       K: tuple, stable_slope: float = 1e-4, min_rate: float = 1.0,
                       confidence: float = 0.95) -> StabilityVerdict:
    """Empirical surrogate for positive recurrence versus transience.

    Per replication: least-squares slope of ``N`` against the slot index
    after warmup, visits to ``K`` and throughput.  The slope interval is a
    two-sided t-interval over replications.

    * transient: lower bound above ``slope_min`` (``(lam - 1/e)/4`` for
      supercritical rates, else ``stable_slope``);
    * stable: upper bound below ``stable_slope`` and at least ``min_rate``
      visits to ``K`` per 1e5 post-warmup slots;
    * inconclusive otherwise.
    """
    if len(traces) < 3:
        raise ValueError("classification needs at least 3 replications")
    slopes, thr = [], []
    hits = 0
    slots = 0
    returns = []
    for tr in traces:
        w = int(cfg.warmup_fraction * tr.summary.slots)
        post = tr.records[tr.records["n"] >= w]
        slopes.append(ols_slope(post["n"], post["N"]))
        thr.append(estimate_throughput(tr, w) if tr.summary.slots else 0.0)
        rc = recurrence_times(tr, K, start=max(w, 1))
        hits += rc.count
        returns.append(rc.returns)
        slots += tr.summary.slots - w
    s = np.array(slopes)
    mean = float(s.mean())
    half = float(stats.t.ppf(0.5 + confidence / 2, len(s) - 1) * s.std(ddof=1) / math.sqrt(len(s)))
    lo, hi = mean - half, mean + half
    slope_min = (arrival_rate - INV_E) / 4.0 if arrival_rate > INV_E else stable_slope
    rate = hits / slots * 1e5 if slots else 0.0
    pooled = np.concatenate(returns) if returns else np.zeros(0)
    if lo > slope_min:
        verdict = TRANSIENT
    elif hi < stable_slope and rate >= min_rate:
        verdict = STABLE
    else:
        verdict = INCONCLUSIVE
    return StabilityVerdict(
        verdict=verdict, slope=mean, slope_ci_lo=lo, slope_ci_hi=hi, slope_min=slope_min,
        recurrences=hits, recurrence_rate=rate,
        mean_return=float(pooled.mean()) if pooled.size else math.nan,
        throughput=float(np.mean(thr)), replications=len(traces), K=tuple(K),
        slopes=slopes, throughputs=thr,
    )


# -- replication and sweeps -------------------------------------------------

def _replicate(task) -> Trace:
    spec, proc, cfg, cell, rep = task
    return run(spec, proc, cfg, cell_stream_id(cell, rep))


def _execute(tasks: list, jobs: int) -> list:
    if jobs <= 1 or len(tasks) <= 1:
        return [_replicate(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_replicate, tasks))


def replicate(spec: Protocol, proc: ArrivalProcess, cfg: RunConfig, jobs: int = 1,
              cell: int = 0) -> list[Trace]:
    return _execute([(spec, proc, cfg, cell, r) for r in range(cfg.replications)], jobs)


def simulate(spec: Protocol, proc: ArrivalProcess, cfg: RunConfig,
             jobs: int = 1) -> tuple[list[Trace], StabilityVerdict]:
    traces = replicate(spec, proc, cfg, jobs)
    verdict = classify_stability(traces, cfg, proc.lam_effective, compact_set(spec, cfg))
    return traces, verdict


@dataclass
class SweepCell:
    index: int
    values: dict
    verdict: Optional[StabilityVerdict] = None
    error: Optional[str] = None


@dataclass
class SweepResult:
    axes: dict
    cells: list
    label: str = ""

    def rows(self) -> list[dict]:
        out = []
        for cell in self.cells:
            row: dict[str, Any] = {name: cell.values[name] for name in self.axes}
            v = cell.verdict
            if v is None:
                row.update(verdict="error", slope=math.nan, slope_ci_lo=math.nan,
                           slope_ci_hi=math.nan, recurrences=0, mean_return=math.nan,
                           throughput=math.nan)
            else:
                row.update(verdict=v.verdict, slope=v.slope, slope_ci_lo=v.slope_ci_lo,
                           slope_ci_hi=v.slope_ci_hi, recurrences=v.recurrences,
                           mean_return=v.mean_return, throughput=v.throughput)
            row["error"] = cell.error or ""
            out.append(row)
        return out


def _cell_models(spec: Protocol, proc: ArrivalProcess, values: dict):
    changes = {k: v for k, v in values.items() if k != "lam"}
    if changes:
        spec = spec.with_params(**changes)
    if "lam" in values:
        proc = proc.with_rate(values["lam"])
    return spec, proc


def sweep(axes: dict, spec: Protocol, proc: ArrivalProcess, cfg: RunConfig,
          jobs: int = 1, label: str = "") -> SweepResult:
    """Classify every point of the cartesian grid spanned by ``axes``.

    ``lam`` rescales the arrival process; any other axis name replaces the
    protocol field of that name.  A cell whose parameters are invalid is
    recorded with its error and the sweep continues.
    """
    if not axes or any(len(v) == 0 for v in axes.values()):
        raise ValueError("sweep needs at least one non-empty axis")
    names = list(axes)
    cells, tasks, models = [], [], []
    for index, combo in enumerate(itertools.product(*(axes[k] for k in names))):
        values = dict(zip(names, combo))
        cell = SweepCell(index, values)
        cells.append(cell)
        try:
            cspec, cproc = _cell_models(spec, proc, values)
        except (ValueError, TypeError) as exc:
            cell.error = f"{type(exc).__name__}: {exc}"
            models.append(None)
            continue
        models.append((cspec, cproc))
        tasks.extend((cspec, cproc, cfg, index, r) for r in range(cfg.replications))
    traces = _execute(tasks, jobs)
    by_cell: dict[int, list] = {}
    for task, tr in zip(tasks, traces):
        by_cell.setdefault(task[3], []).append(tr)
    for cell, model in zip(cells, models):
        if model is None:
            continue
        cspec, cproc = model
        try:
            cell.verdict = classify_stability(by_cell[cell.index], cfg, cproc.lam_effective,
                                              compact_set(cspec, cfg))
        except ValueError as exc:
            cell.error = f"{type(exc).__name__}: {exc}"
    return SweepResult(dict(axes), cells, label)


class ClassValidationError(ValueError):
    def __init__(self, message: str, reports: dict):
        super().__init__(message)
        self.reports = reports


@dataclass
class Exploration:
    family: str
    h: HFunction
    eps: Optional[EpsFunction]
    reports: dict
    result: SweepResult
    label: str = "conjecture evidence (finite-sample, not a proof)"


def explore_conjectures(family: str, selections: Sequence[tuple], lambdas: Sequence[float],
                        proc: ArrivalProcess, cfg: RunConfig, *, C: float = 2.0,
                        beta: float = 0.99, S_init: float = 1.0, jobs: int = 1) -> list[Exploration]:
    """Probe the A2/A3 families over a grid of input rates.

    ``selections`` holds ``(h, eps)`` pairs (``eps`` ignored for A2).  All
    pairs are validated before any simulation; a failing pair aborts the
    call with :class:`ClassValidationError`.
    """
    if family not in ("A2", "A3"):
        raise ValueError("family must be 'A2' or 'A3'")
    if not selections:
        raise ValueError("no (h, eps) selections given")
    checked = []
    for h, eps in selections:
        reports = {"h": validate_h(h)}
        if family == "A3":
            if eps is None:
                raise ValueError("A3 needs an eps function")
            reports["eps"] = validate_eps(h, eps)
        bad = {k: r.failures for k, r in reports.items() if not r.passed}
        if bad:
            raise ClassValidationError(f"{family} selection h={h.label()} rejected: {bad}",
                                       {k: r.to_dict() for k, r in reports.items()})
        checked.append((h, eps, reports))
    out = []
    for h, eps, reports in checked:
        if family == "A2":
            spec = A2(C=C, beta=beta, h=h, S_init=S_init)
        else:
            spec = A3(C=C, h=h, eps=eps, S_init=S_init)
        label = f"{family} h={h.label()}" + (f" eps={eps.label()}" if family == "A3" else "")
        result = sweep({"lam": list(lambdas)}, spec, proc, cfg, jobs, label)
        out.append(Exploration(family, h, eps if family == "A3" else None,
                               {k: r.to_dict() for k, r in reports.items()}, result))
    return out
