"""Per-epoch protocol constants, the estimate search, and round schedules.

Every quantity an epoch needs is a function of the size estimate ``k``, the
black-node count ``ell`` and the slack exponent ``epsilon``.  The exponents
are fixed at the smallest convenient values that satisfy the correctness
conditions, with a constant additive margin on ``delta``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from typing import Callable

__all__ = [
    "INF",
    "DELTA_MARGIN",
    "Mode",
    "PAPER",
    "EpochParams",
    "EstimateState",
    "Schedule",
    "SearchInconsistency",
    "derive_epoch_params",
    "check_conditions",
    "update_estimate",
    "initial_estimate",
    "worst_case_schedule",
    "search_sequence",
    "max_search_rounds",
]

INF = math.inf
DELTA_MARGIN = 0.05


@dataclass(frozen=True)
class Mode:
    """Parameter regime: the guaranteed values, or p and r shrunk by factors.

    Scaled runs carry no correctness guarantee; they exist so that
    experiments finish at desk scale.
    """

    s_p: float = 1.0
    s_r: float = 1.0

    def __post_init__(self):
        for name in ("s_p", "s_r"):
            s = getattr(self, name)
            if not 0.0 < s <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1], got {s}")

    @classmethod
    def scaled(cls, s_p: float, s_r: float | None = None) -> "Mode":
        return cls(s_p, s_p if s_r is None else s_r)

    @property
    def is_paper(self) -> bool:
        return self.s_p == 1.0 and self.s_r == 1.0

    def to_json(self):
        if self.is_paper:
            return "paper"
        return {"scaled": [self.s_p, self.s_r], "guarantee": "none"}

    @classmethod
    def from_json(cls, obj) -> "Mode":
        if obj == "paper" or obj is None:
            return PAPER
        if isinstance(obj, dict) and "scaled" in obj:
            s_p, s_r = obj["scaled"]
            return cls(float(s_p), float(s_r))
        raise ValueError(f"unrecognised mode {obj!r}")

    def __str__(self):
        return "paper" if self.is_paper else f"scaled({self.s_p:g},{self.s_r:g})"


PAPER = Mode()


@dataclass(frozen=True)
class EpochParams:
    k: int
    ell: int
    epsilon: float
    d: int
    p: int
    r: int
    tau: float
    alpha: float
    beta: float
    gamma: float
    delta: float
    mode: Mode = field(default=PAPER, compare=False)

    @property
    def band(self) -> tuple[float, float]:
        """Inclusive range of the accumulator that certifies ``k == n``."""
        return _band(self.k, self.ell, self.gamma)

    @property
    def epoch_rounds(self) -> int:
        return self.p * self.r + self.d


def _pow_ceil(k: int, e: float) -> int:
    """``ceil(k**e)`` that does not round exact integer powers up by one ulp."""
    x = k**e
    m = round(x)
    if abs(x - m) <= 1e-9 * x:
        frac = Fraction(e).limit_denominator(10_000)
        if abs(float(frac) - e) < 1e-15 and m**frac.denominator == k**frac.numerator:
            return int(m)
    return math.ceil(x)


def _log(x: float, k: int) -> float:
    return math.log(x) / math.log(k)


def _band(k: int, ell: int, gamma: float) -> tuple[float, float]:
    w = k ** (-gamma)
    return (k - ell) * (1.0 - w), (k - ell) * (1.0 + w)


@lru_cache(maxsize=4096)
def _paper_params(k: int, ell: int, epsilon: float) -> EpochParams:
    d = _pow_ceil(k, 1.0 + epsilon)
    gamma = _log(d, k)
    alpha = 1.0 + gamma + _log(3, k)
    # with gamma = log_k d the delta condition reduces to delta > 2*gamma
    delta = 2.0 * gamma + DELTA_MARGIN
    beta = _log(d * (2.0 * k**delta + 1.0), k)
    lnk = math.log(k)
    p = math.ceil(
        2.0 * lnk / ell * max(gamma / (1.0 / k + k ** (-alpha)), delta / (1.0 / d + k ** (-beta)))
    )
    third = 2.0 + epsilon - math.log(k**epsilon - 1.0) / lnk
    r = math.ceil(2.0 * d * k * k * lnk * max(alpha, beta * k ** (2.0 * epsilon), third))
    tau = ell * (1.0 - ell / k ** (1.0 + epsilon))
    return EpochParams(k, ell, epsilon, d, p, r, tau, alpha, beta, gamma, delta)


def derive_epoch_params(k: int, ell: int, epsilon: float, mode: Mode = PAPER) -> EpochParams:
    """Constants for the epoch that tests estimate ``k``.

    >>> ep = derive_epoch_params(2, 1, 1.0)
    >>> (ep.d, ep.p, ep.r, ep.tau)
    (4, 22, 630, 0.75)
    """
    if ell < 1:
        raise ValueError(f"ell must be >= 1, got {ell}")
    if k <= ell:
        raise ValueError(f"estimate k={k} must exceed the black count ell={ell}")
    if not epsilon > 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    ep = _paper_params(int(k), int(ell), float(epsilon))
    if mode.is_paper:
        return ep
    p = max(1, math.floor(ep.p * mode.s_p))
    r = max(1, math.floor(ep.r * mode.s_r))
    return EpochParams(
        ep.k, ep.ell, ep.epsilon, ep.d, p, r, ep.tau,
        ep.alpha, ep.beta, ep.gamma, ep.delta, mode,
    )


def check_conditions(ep: EpochParams) -> dict[str, bool]:
    """Evaluate the exponent conditions the correctness argument relies on."""
    k, d = ep.k, ep.d
    kg = k**ep.gamma
    den = kg + 1.0 - d
    return {
        "epsilon": ep.epsilon > 0,
        "alpha": ep.alpha >= 1.0 + ep.gamma + _log(3, k) - 1e-12,
        "beta": ep.beta >= _log(d * (2.0 * k**ep.delta + 1.0), k) - 1e-12,
        "gamma": ep.gamma > _log(d - 1, k),
        "delta": den > 0 and ep.delta > _log(d * kg / den, k),
        "d": d >= k + 1 and d >= k ** (1.0 + ep.epsilon) * (1 - 1e-15),
        "tau": 0.0 < ep.tau < ep.ell,
    }


class SearchInconsistency(RuntimeError):
    """The estimate range became empty; impossible in a correct run."""


@dataclass(frozen=True)
class EstimateState:
    k: int
    min: int
    max: float  # INF until the first "high" verdict

    def to_json(self):
        return {"k": self.k, "min": self.min, "max": "inf" if self.max == INF else int(self.max)}

    @classmethod
    def from_json(cls, obj) -> "EstimateState":
        mx = obj["max"]
        return cls(int(obj["k"]), int(obj["min"]), INF if mx == "inf" else int(mx))


def initial_estimate(ell: int) -> EstimateState:
    return EstimateState(ell + 1, ell + 1, INF)


def update_estimate(status: str, s: EstimateState) -> EstimateState:
    """Move the estimate after an epoch that ended ``low`` or ``high``."""
    if status == "low":
        lo = s.k + 1
        hi = s.max
        k = 2 * s.k if hi == INF else (lo + int(hi)) // 2
    elif status == "high":
        lo = s.min
        hi = s.k - 1
        if lo > hi:
            raise SearchInconsistency(f"empty range after 'high' at k={s.k}: min={lo} > max={hi}")
        k = (lo + hi) // 2
    else:
        raise ValueError(f"status must be 'low' or 'high', got {status!r}")
    if hi != INF and lo > hi:
        raise SearchInconsistency(f"empty range after {status!r} at k={s.k}: min={lo} > max={hi}")
    return EstimateState(k, lo, hi)


@dataclass(frozen=True)
class Schedule:
    E: tuple[int, ...]
    B: tuple[int, ...]
    per_epoch_rounds: dict
    total_bound: int


def _doubling_exponent(n: int, ell: int) -> int:
    # log of ceil(n/(ell+1)), rounded up so that the doubling set reaches n
    m = -(-n // (ell + 1))
    return (m - 1).bit_length()


def worst_case_schedule(n: int, ell: int, epsilon: float, mode: Mode = PAPER) -> Schedule:
    """The doubling set E, the binary-search set B, and the summed epoch lengths."""
    if not n > ell >= 1:
        raise ValueError(f"need n > ell >= 1, got n={n}, ell={ell}")
    top = _doubling_exponent(n, ell)
    E = tuple((2**i) * (ell + 1) for i in range(top + 1))
    B = tuple((2**top - 2**i) * (ell + 1) for i in range(top - 1))
    per = {k: derive_epoch_params(k, ell, epsilon, mode).epoch_rounds for k in sorted(set(E) | set(B))}
    return Schedule(E, B, per, sum(per.values()))


def search_sequence(n: int, ell: int) -> list[int]:
    """Estimates visited by a run in which every epoch is classified correctly."""
    if not n > ell >= 1:
        raise ValueError(f"need n > ell >= 1, got n={n}, ell={ell}")
    s = initial_estimate(ell)
    seq = [s.k]
    while s.k != n:
        s = update_estimate("low" if s.k < n else "high", s)
        seq.append(s.k)
    return seq


def max_search_rounds(K: int, ell: int, cost: Callable[[int], int]) -> int:
    """Largest total of ``cost(k)`` over any estimate path that stays at or below ``K``.

    Every epoch may end low, high, or done; the path stops once the estimate
    exceeds ``K`` or the range empties.  This bounds the rounds any node can
    spend in the estimate loop regardless of how its epochs are classified.
    """

    @lru_cache(maxsize=None)
    def worst(k: int, lo: int, hi: float) -> int:
        if k > K:
            return 0
        best = 0
        try:
            s = update_estimate("low", EstimateState(k, lo, hi))
            best = max(best, worst(s.k, s.min, s.max))
        except SearchInconsistency:
            pass
        try:
            s = update_estimate("high", EstimateState(k, lo, hi))
            best = max(best, worst(s.k, s.min, s.max))
        except SearchInconsistency:
            pass
        return cost(k) + best

    s0 = initial_estimate(ell)
    return worst(s0.k, s0.min, s0.max)
