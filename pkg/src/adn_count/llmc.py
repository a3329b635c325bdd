"""Randomised leaderless counting built on a trimmed run of the deterministic protocol.

Without a distinguished node, the network manufactures its own: in each of
many parallel threads every node turns black with probability ``2/K``.  A
thread runs the counting protocol told there is exactly one black node,
with the estimate capped at ``K``, and reports both its count (0 if it
never settled) and whether any black node existed at all.  Threads with a
single black node count correctly; the ones with none report an empty
flag.  When more than half the threads were empty and some thread produced
a count, the node keeps the largest count seen.  ``K`` doubles every
iteration, and the protocol never terminates on its own.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from .engine import run_lanes
from .mmc import ProtocolConfig, RoundBudgetExceeded
from .netsim import BLACK, WHITE, AdversarySpec, substream
from .params import PAPER, Mode, derive_epoch_params, max_search_rounds

log = logging.getLogger(__name__)

__all__ = [
    "initial_K",
    "thread_count",
    "black_probability",
    "paper_round_max",
    "MmctConfig",
    "MmctResult",
    "run_mmct",
    "LlmcState",
    "IterationDiagnostics",
    "llmc_step",
    "run_llmc",
    "LlmcRun",
    "draw_roles",
    "fold_threads",
]

_LOG_RATIO = math.log(math.e / (math.e - 2.0))


def initial_K(zeta: float) -> int:
    """Smallest power of two strictly greater than ``12 / zeta``."""
    if not zeta > 0:
        raise ValueError(f"zeta must be positive, got {zeta}")
    x = Fraction(12) / Fraction(zeta)
    K = 1
    while K <= x:
        K *= 2
    return K


def thread_count(K: int, zeta: float) -> int:
    """Number of parallel threads in the iteration with cap ``K``."""
    if K < 2:
        raise ValueError("K must be at least 2")
    return math.ceil(64.0 * math.log(K / zeta) / _LOG_RATIO)


def black_probability(K: int) -> float:
    if K < 4:
        raise ValueError("K must be at least 4")
    return 2.0 / K


def _epoch_cost(ell: int, epsilon: float, mode: Mode):
    return lambda k: derive_epoch_params(k, ell, epsilon, mode).epoch_rounds


def paper_round_max(K: int, epsilon: float, mode: Mode = PAPER, ell_prime: int = 1) -> int:
    """Horizon summed over the power-of-two estimates ``2, 4, ..., K`` only."""
    cost = _epoch_cost(ell_prime, epsilon, mode)
    top = max(1, math.ceil(math.log2(K)))
    return sum(cost(2**i) for i in range(1, top + 1))


@dataclass(frozen=True)
class MmctConfig:
    """Cap, aimed black count, and the round count every node runs for.

    ``round_max`` defaults to the longest total any estimate path below the
    cap can take, so every node leaves the estimate loop before it.
    """

    K: int
    ell_prime: int = 1
    round_max: int = 0
    epsilon: float = 0.5
    mode: Mode = PAPER

    @classmethod
    def for_cap(cls, K: int, epsilon: float = 0.5, mode: Mode = PAPER, ell_prime: int = 1) -> "MmctConfig":
        rm = max_search_rounds(K, ell_prime, _epoch_cost(ell_prime, epsilon, mode))
        return cls(K, ell_prime, rm, epsilon, mode)

    def protocol(self) -> ProtocolConfig:
        return ProtocolConfig(self.ell_prime, self.epsilon, self.mode, cap=self.K, round_max=self.round_max, strict=False)

    def to_json(self) -> dict:
        return {
            "K": self.K, "ell_prime": self.ell_prime, "round_max": self.round_max, "epsilon": self.epsilon,
            "mode": self.mode.to_json(), "round_max_rule": "max over estimate paths up to K",
            "power_of_two_round_max": paper_round_max(self.K, self.epsilon, self.mode, self.ell_prime),
        }


@dataclass
class MmctResult:
    """Per-lane, per-node ``(count, b)`` and how many rounds the lanes ran."""

    counts: list  # counts[lane][node]
    flags: list  # flags[lane][node]
    rounds: int
    simulated_rounds: int
    skipped_rounds: int
    trace: object = None

    def pairs(self, lane: int = 0) -> list[tuple[int, bool]]:
        return list(zip(self.counts[lane], self.flags[lane]))


def run_mmct(
    cfg: MmctConfig,
    roles: Sequence[str] | Sequence[Sequence[str]],
    adv: AdversarySpec,
    *,
    start_round: int = 0,
    exact: bool = False,
    round_budget: int | None = None,
    record: bool = False,
) -> MmctResult:
    """Run one or more threads of the trimmed protocol to the shared horizon.

    Raises :class:`RoundBudgetExceeded` if ``round_budget`` rounds pass
    before the horizon; its ``partial`` attribute holds the lane output.
    """
    lanes = [list(roles)] if roles and isinstance(roles[0], str) else [list(r) for r in roles]
    n = len(lanes[0])
    out = run_lanes(n, lanes, cfg.protocol(), adv, start_round=start_round, exact=exact,
                    round_budget=round_budget, record=record)
    if out.status != "done":
        raise RoundBudgetExceeded(f"trimmed protocol did not reach round {cfg.round_max} within {round_budget} rounds", out)
    counts = [[0 if c is None else c for c in lane.results] for lane in out.lanes]
    flags = [lane.black_flags for lane in out.lanes]
    return MmctResult(counts, flags, out.rounds, out.simulated, out.skipped, out.trace)


# ---------------------------------------------------------------------------
# driver


@dataclass
class IterationDiagnostics:
    K: int
    threads: int
    black_counts: list
    empty_threads: list  # per node
    count_sets: list  # per node, sorted
    counts_after: list
    round_max: int
    power_of_two_round_max: int
    simulated_rounds: int
    start_round: int

    def to_json(self) -> dict:
        d = dict(self.__dict__)
        d["black_count_histogram"] = np.bincount(self.black_counts).tolist()
        del d["black_counts"]
        return d


@dataclass
class LlmcState:
    n: int
    zeta: float
    seed: int
    K: int
    counts: list
    iteration: int = 0
    round: int = 0
    count_sets: list = field(default_factory=list)
    empty_threads: list = field(default_factory=list)

    @classmethod
    def start(cls, n: int, zeta: float, seed: int = 0) -> "LlmcState":
        return cls(n, zeta, seed, initial_K(zeta), [0] * n)


def draw_roles(n: int, K: int, threads: int, seed: int) -> list[list[str]]:
    """Independent black/white draws per (iteration cap, thread, node)."""
    p = black_probability(K)
    out = []
    for t in range(threads):
        row = []
        for v in range(n):
            u = (substream(seed, "black", K, t, v) >> 11) * 2.0**-53
            row.append(BLACK if u < p else WHITE)
        out.append(row)
    return out


def fold_threads(counts: Sequence[int], thread_counts, thread_flags) -> tuple[list, list, list]:
    """Each node's update from one iteration's thread results.

    ``thread_counts[t][v]`` and ``thread_flags[t][v]`` are what thread ``t``
    returned at node ``v``.  A node collects its positive counts and the
    number of threads in which it saw no black node; it raises its count to
    the largest collected value only if more than half the threads were
    empty.  Returns ``(counts, count_sets, empty_threads)``.
    """
    f = len(thread_counts)
    n = len(counts)
    sets = [sorted({int(thread_counts[t][v]) for t in range(f) if thread_counts[t][v] > 0}) for v in range(n)]
    empty = [sum(1 for t in range(f) if not thread_flags[t][v]) for v in range(n)]
    out = list(counts)
    for v in range(n):
        if sets[v] and empty[v] > f / 2:
            out[v] = max(out[v], sets[v][-1])
    return out, sets, empty


def llmc_step(
    state: LlmcState,
    adv: AdversarySpec,
    *,
    epsilon: float = 0.5,
    mode: Mode = PAPER,
    exact: bool = False,
    round_budget: int | None = None,
) -> tuple[LlmcState, IterationDiagnostics]:
    """One iteration: double ``K``, run every thread, and fold the results in."""
    n = state.n
    K = 2 * state.K
    f = thread_count(K, state.zeta)
    roles = draw_roles(n, K, f, state.seed)
    cfg = MmctConfig.for_cap(K, epsilon, mode)
    res = run_mmct(cfg, roles, adv, start_round=state.round, exact=exact, round_budget=round_budget)
    counts, sets, empty = fold_threads(state.counts, res.counts, res.flags)
    diag = IterationDiagnostics(
        K=K, threads=f, black_counts=[sum(r == BLACK for r in row) for row in roles],
        empty_threads=empty, count_sets=sets, counts_after=counts, round_max=cfg.round_max,
        power_of_two_round_max=paper_round_max(K, epsilon, mode), simulated_rounds=res.simulated_rounds,
        start_round=state.round,
    )
    new = LlmcState(n, state.zeta, state.seed, K, counts, state.iteration + 1, state.round + res.rounds, sets, empty)
    return new, diag


@dataclass
class LlmcRun:
    n: int
    zeta: float
    trajectories: list  # trajectories[node] = counts after each iteration, starting with 0
    diagnostics: list
    final: LlmcState
    budget_exhausted: bool = False

    def summary(self) -> dict:
        return {
            "protocol": "llmc", "n": self.n, "zeta": self.zeta,
            "final_counts": self.final.counts, "trajectories": self.trajectories,
            "iterations": [d.to_json() for d in self.diagnostics], "total_rounds": self.final.round,
            "budget_exhausted": self.budget_exhausted,
        }


def run_llmc(
    n: int,
    zeta: float,
    adv: AdversarySpec,
    mode: Mode = PAPER,
    stop_after_iterations: int = 1,
    *,
    epsilon: float = 0.5,
    seed: int = 0,
    exact: bool = False,
    round_budget: int | None = None,
) -> LlmcRun:
    """Run a fixed number of iterations (the protocol never stops by itself).

    ``round_budget`` limits each iteration.  An iteration that runs out of
    rounds is dropped, the run stops early and ``budget_exhausted`` is set.
    """
    if n < 2:
        raise ValueError("need n >= 2")
    state = LlmcState.start(n, zeta, seed)
    traj = [[0] for _ in range(n)]
    diags = []
    for _ in range(stop_after_iterations):
        try:
            state, d = llmc_step(state, adv, epsilon=epsilon, mode=mode, exact=exact, round_budget=round_budget)
        except RoundBudgetExceeded:
            log.warning("iteration with K=%d ran out of rounds", 2 * state.K)
            return LlmcRun(n, zeta, traj, diags, state, True)
        diags.append(d)
        for v in range(n):
            traj[v].append(state.counts[v])
        log.info("iteration K=%d threads=%d counts=%s", d.K, d.threads, state.counts)
    return LlmcRun(n, zeta, traj, diags, state)
