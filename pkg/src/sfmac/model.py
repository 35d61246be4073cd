"""Exact slot dynamics of the backlog/estimator chain.

One slot: flip the protocol coin, let every backlogged message transmit
with probability ``p``, observe success/failure, then add the arrivals of
the slot.  The backlog obeys ``N' = N - J + xi``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import IntEnum
from typing import NamedTuple

import numpy as np

from .rng import RngStream

ARRIVAL_KINDS = ("poisson", "bernoulli_batch", "deterministic", "pareto_poisson")


class Ternary(IntEnum):
    """Classical channel observation, only fed to the ternary baselines."""

    EMPTY = 0
    SUCCESS = 1
    COLLISION = 2


class Feedback(NamedTuple):
    J: int
    ternary: Ternary

    @property
    def success(self) -> bool:
        return self.J == 1


@dataclass(frozen=True)
class ArrivalProcess:
    """I.i.d. per-slot arrival counts.

    ``pareto_poisson`` is a Poisson count whose intensity is drawn from a
    Lomax law with tail index ``alpha`` (mean ``rate``); it gives a
    heavy-tailed arrival count with the same mean.
    """

    kind: str = "poisson"
    rate: float = 0.0
    k: int = 1
    q: float = 0.0
    c: int = 0
    alpha: float = 2.5

    def __post_init__(self):
        if self.kind not in ARRIVAL_KINDS:
            raise ValueError(f"unknown arrival kind {self.kind!r}")
        if self.kind in ("poisson", "pareto_poisson"):
            if not (self.rate >= 0 and math.isfinite(self.rate)):
                raise ValueError(f"arrival rate must be finite and >= 0, got {self.rate}")
        if self.kind == "pareto_poisson" and not self.alpha > 1:
            raise ValueError("pareto_poisson needs alpha > 1 for a finite mean")
        if self.kind == "bernoulli_batch":
            if self.k < 0 or not 0 <= self.q <= 1:
                raise ValueError("bernoulli_batch needs k >= 0 and q in [0, 1]")
        if self.kind == "deterministic" and (self.c < 0 or int(self.c) != self.c):
            raise ValueError("deterministic arrivals need a non-negative integer c")

    @classmethod
    def poisson(cls, lam: float) -> "ArrivalProcess":
        return cls("poisson", rate=float(lam))

    @classmethod
    def bernoulli_batch(cls, k: int, q: float) -> "ArrivalProcess":
        return cls("bernoulli_batch", k=int(k), q=float(q))

    @classmethod
    def deterministic(cls, c: int) -> "ArrivalProcess":
        return cls("deterministic", c=int(c))

    @classmethod
    def pareto_poisson(cls, lam: float, alpha: float) -> "ArrivalProcess":
        return cls("pareto_poisson", rate=float(lam), alpha=float(alpha))

    @property
    def lam_effective(self) -> float:
        if self.kind == "bernoulli_batch":
            return self.k * self.q
        if self.kind == "deterministic":
            return float(self.c)
        return self.rate

    def with_rate(self, lam: float) -> "ArrivalProcess":
        """Same process family rescaled to mean ``lam``."""
        if self.kind in ("poisson", "pareto_poisson"):
            return ArrivalProcess(self.kind, rate=float(lam), alpha=self.alpha)
        if self.kind == "bernoulli_batch":
            if self.k == 0:
                raise ValueError("cannot rescale a zero-size batch")
            return ArrivalProcess.bernoulli_batch(self.k, lam / self.k)
        if lam != int(lam):
            raise ValueError("deterministic arrivals need an integer rate")
        return ArrivalProcess.deterministic(int(lam))

    def draw(self, gen: np.random.Generator) -> int:
        kind = self.kind
        if kind == "poisson":
            return int(gen.poisson(self.rate))
        if kind == "bernoulli_batch":
            return self.k if gen.random() < self.q else 0
        if kind == "deterministic":
            return self.c
        intensity = self.rate * (self.alpha - 1.0) * gen.pareto(self.alpha)
        return int(gen.poisson(intensity))

    def draw_block(self, gen: np.random.Generator, size: int) -> list[int]:
        """``size`` draws, identical to ``size`` successive :meth:`draw` calls."""
        kind = self.kind
        if kind == "poisson":
            return gen.poisson(self.rate, size).tolist()
        if kind == "bernoulli_batch":
            return np.where(gen.random(size) < self.q, self.k, 0).tolist()
        if kind == "deterministic":
            return [self.c] * size
        # interleaved pareto/poisson draws cannot be vectorized without
        # reordering the stream
        return [self.draw(gen) for _ in range(size)]


@dataclass(frozen=True, slots=True)
class SystemState:
    n: int = 0
    N: int = 0
    S: float = 1.0
    J_prev: int = 0
    I_prev: int = 0

    def __post_init__(self):
        if self.N < 0 or self.S < 1:
            raise ValueError(f"invalid state: N={self.N}, S={self.S}")
        if self.J_prev not in (0, 1) or self.I_prev not in (0, 1):
            raise ValueError("J_prev and I_prev must be 0 or 1")


def sample_arrivals(proc: ArrivalProcess, rng: RngStream) -> int:
    return proc.draw(rng.arrivals)


def draw_coin(rng: RngStream) -> int:
    """Fair coin ``I`` from the coin lane: 1 with probability 1/2."""
    return 1 if rng.coin.random() < 0.5 else 0


def outcome_probabilities(N: int, p: float) -> tuple[float, float]:
    """``(P(B=0), P(B=1))`` for ``B ~ Binomial(N, p)``."""
    if N == 0:
        return 1.0, 0.0
    if p >= 1.0:
        return 0.0, (1.0 if N == 1 else 0.0)
    q = math.exp((N - 1) * math.log1p(-p))
    return q * (1.0 - p), N * p * q


def channel_outcome(u: float, N: int, p: float) -> int:
    """Map a channel uniform to 0 (empty), 1 (success) or 2 (collision)."""
    p0, p1 = outcome_probabilities(N, p)
    if u < p0:
        return 0
    if u < p0 + p1:
        return 1
    return 2


def binomial_from_uniform(u: float, N: int, p: float) -> int:
    """Inverse-cdf draw of ``Binomial(N, p)`` from one uniform ``u``.

    The branch for ``B <= 1`` uses the same thresholds as
    :func:`channel_outcome`, so the two never disagree on the feedback.
    """
    p0, p1 = outcome_probabilities(N, p)
    if u < p0:
        return 0
    if u < p0 + p1:
        return 1
    if p >= 1.0:
        return N
    if N * p <= 50.0 and p <= 0.5:
        ratio = p / (1.0 - p)
        pmf = p1
        cdf = p0 + p1
        k = 1
        while k < N:
            pmf *= (N - k) / (k + 1) * ratio
            k += 1
            cdf += pmf
            if u < cdf or pmf < 1e-17 * cdf:
                return k
        return N
    from scipy.stats import binom

    return max(2, int(binom.ppf(u, N, p)))


def transmit(N: int, p: float, rng: RngStream) -> int:
    """Number of messages sent in a slot, ``B ~ Binomial(N, p)``.

    Always consumes exactly one channel draw, including when ``N == 0``.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"transmission probability must lie in [0, 1], got {p}")
    if N < 0:
        raise ValueError("backlog must be non-negative")
    return binomial_from_uniform(rng.channel.random(), N, p)


def feedback(B: int) -> Feedback:
    if B < 0:
        raise ValueError("B must be non-negative")
    if B == 1:
        return Feedback(1, Ternary.SUCCESS)
    return Feedback(0, Ternary.EMPTY if B == 0 else Ternary.COLLISION)


def step(state: SystemState, spec, proc: ArrivalProcess, rng: RngStream) -> SystemState:
    """Advance the chain by one slot.

    Draw order per slot is coin, channel, arrivals, each from its own lane;
    the bulk engine in :mod:`sfmac.harness` relies on this.
    """
    coin = draw_coin(rng)
    p = spec.probability(state.S, coin)
    B = transmit(state.N, p, rng)
    fb = feedback(B)
    xi = sample_arrivals(proc, rng)
    signal = fb.J if spec.feedback_kind == "binary" else fb.ternary
    S = spec.update(state.S, signal, coin)
    return SystemState(state.n + 1, state.N - fb.J + xi, S, fb.J, coin)
