"""Deterministic counting by potential averaging, one node at a time.

Every node keeps a potential.  White nodes start with ``ell`` units, black
nodes with none.  Within a phase, nodes average their potential with their
current neighbours.  At each phase end the black nodes drain what reached
them into an accumulator.  After ``p`` phases the accumulator says whether
the size estimate ``k`` was too low, too high, or right.  A short
dissemination stage spreads the verdict, and everybody moves to the next
estimate or stops.

This module holds the per-node transition function :func:`mmc_round` and a
small pure-Python world that drives it.  The world is the reference
semantics.  The compiled kernel in :mod:`adn_count.engine` must agree with
it bit for bit, and is what :func:`run_mmc` uses by default.
"""

from __future__ import annotations

import dataclasses
import enum
import logging
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Any, Sequence

import numpy as np

from .netsim import BLACK, AdversarySpec, Topology, deliver, next_topology
from .params import (
    INF,
    PAPER,
    EpochParams,
    EstimateState,
    Mode,
    SearchInconsistency,
    derive_epoch_params,
    initial_estimate,
    update_estimate,
)

log = logging.getLogger(__name__)

__all__ = [
    "Status",
    "Role",
    "Stage",
    "Event",
    "Pc",
    "ProtocolConfig",
    "NodeState",
    "MmcMessage",
    "ProtocolConflict",
    "LockstepError",
    "RoundBudgetExceeded",
    "potential_update",
    "classify_rho",
    "initial_state",
    "message_of",
    "mmc_round",
    "World",
    "RunResult",
    "run_mmc",
]


class Status(enum.IntEnum):
    PROBING = 0
    LOW = 1
    HIGH = 2
    DONE = 3


class Role(enum.IntEnum):
    WHITE = 0
    BLACK = 1


class Stage(enum.IntEnum):
    AVERAGING = 0
    DISSEMINATION = 1
    IDLE = 2  # estimate loop left, waiting for the synchronisation horizon
    STOPPED = 3


class Event(enum.IntFlag):
    NONE = 0
    ALARM_DEGREE = 1
    ALARM_RECEIVED = 2
    ALARM_THRESHOLD = 4
    CONSUME = 8
    STATUS_CHANGE = 16
    STOP = 32


class ProtocolConflict(RuntimeError):
    """A white node heard two different verdicts in one epoch."""


class LockstepError(RuntimeError):
    """Nodes disagree on their position in the protocol."""


class RoundBudgetExceeded(RuntimeError):
    def __init__(self, msg, partial=None):
        super().__init__(msg)
        self.partial = partial


@dataclass(frozen=True, order=True)
class Pc:
    """Position inside an epoch: stage, phase (1-based), round within the phase or dissemination."""

    stage: Stage
    phase: int
    rnd: int


@dataclass(frozen=True)
class ProtocolConfig:
    """Constants every node shares.

    ``cap`` > 0 turns the protocol into its trimmed variant: the estimate
    loop is left once ``k`` exceeds ``cap`` and nodes idle until
    ``round_max`` rounds have passed.
    """

    ell: int
    epsilon: float
    mode: Mode = PAPER
    cap: int = 0
    round_max: int = 0
    strict: bool = True

    def params(self, k: int) -> EpochParams:
        return _params(k, self.ell, self.epsilon, self.mode)


@lru_cache(maxsize=None)
def _params(k, ell, epsilon, mode):
    return derive_epoch_params(k, ell, epsilon, mode)


@dataclass(frozen=True, order=True)
class MmcMessage:
    """What a node broadcasts: its status, potential, and black-existence flag."""

    status: Status
    phi: float
    b: bool = False

    def to_json(self):
        return [int(self.status), self.phi, bool(self.b)]


@dataclass(frozen=True)
class NodeState:
    role: Role
    phi: float
    rho: float
    status: Status
    est: EstimateState
    pc: Pc
    params: EpochParams
    cfg: ProtocolConfig = field(repr=False)
    b: bool = False
    heard: Status | None = None
    rounds_executed: int = 0
    result: int | None = None
    events: Event = Event.NONE

    @property
    def stopped(self) -> bool:
        return self.pc.stage == Stage.STOPPED

    def key(self) -> tuple:
        """Everything a node knows, as a hashable tuple (events excluded)."""
        e = self.est
        return (
            int(self.role), self.phi, self.rho, int(self.status), e.k, e.min, e.max,
            int(self.pc.stage), self.pc.phase, self.pc.rnd, -1 if self.heard is None else int(self.heard),
            bool(self.b), self.rounds_executed, -1 if self.result is None else self.result,
        )


def potential_update(phi: float, inbox_phis: Sequence[float], d: int) -> float:
    """Average toward the neighbours: ``phi + sum(x - phi for x in inbox) / d``.

    Neighbour values are visited in ascending order with a plain left fold,
    so the result is independent of how the inbox was listed and equal
    potentials map exactly to themselves.
    """
    s = 0.0
    for x in sorted(inbox_phis):
        s += x - phi
    return phi + s / d


def classify_rho(rho: float, k: int, ell: int, gamma: float) -> Status:
    """Verdict of a black node at the end of an epoch's averaging stage."""
    w = k ** (-gamma)
    lo, hi = (k - ell) * (1.0 - w), (k - ell) * (1.0 + w)
    if rho < lo:
        return Status.HIGH
    if rho > hi:
        return Status.LOW
    return Status.DONE


def _epoch_start(role: Role, est: EstimateState, cfg: ProtocolConfig) -> dict:
    return dict(
        phi=0.0 if role == Role.BLACK else float(cfg.ell),
        rho=0.0,
        status=Status.PROBING,
        est=est,
        pc=Pc(Stage.AVERAGING, 1, 1),
        params=cfg.params(est.k),
        heard=None,
    )


def initial_state(role: Role | str, cfg: ProtocolConfig) -> NodeState:
    role = Role.BLACK if role in (Role.BLACK, BLACK) else Role.WHITE
    return NodeState(role=role, cfg=cfg, b=role == Role.BLACK, **_epoch_start(role, initial_estimate(cfg.ell), cfg))


def message_of(state: NodeState) -> MmcMessage | None:
    """The broadcast for the coming round; stopped nodes are silent."""
    if state.stopped:
        return None
    return MmcMessage(state.status, state.phi, state.b)


def _leave_loop(st: dict, result: int, rex: int, cfg: ProtocolConfig) -> Event:
    st["result"] = result
    if cfg.cap and rex < cfg.round_max:
        st["pc"] = Pc(Stage.IDLE, 0, 0)
        return Event.NONE
    st["pc"] = Pc(Stage.STOPPED, 0, 0)
    return Event.STOP


def mmc_round(state: NodeState, inbox: Sequence[MmcMessage]) -> tuple[NodeState, MmcMessage | None]:
    """Advance one node by one round, given the multiset it just received.

    Returns the successor state and the message it will broadcast next.
    """
    if state.stopped:
        return dataclasses.replace(state, events=Event.NONE), None
    cfg, ep, pc = state.cfg, state.params, state.pc
    ell = float(cfg.ell)
    rex = state.rounds_executed + 1
    st: dict[str, Any] = {"rounds_executed": rex, "b": state.b or any(m.b for m in inbox)}
    ev = Event.NONE

    if pc.stage == Stage.IDLE:
        if rex >= cfg.round_max:
            st["pc"] = Pc(Stage.STOPPED, 0, 0)
            ev |= Event.STOP
    elif pc.stage == Stage.AVERAGING:
        phi, rho, status = state.phi, state.rho, state.status
        if status == Status.PROBING:
            if len(inbox) > ep.d - 1:
                ev |= Event.ALARM_DEGREE
            if any(m.status != Status.PROBING for m in inbox):
                ev |= Event.ALARM_RECEIVED
            if ev:
                status, phi = Status.LOW, ell
                ev |= Event.STATUS_CHANGE
            else:
                phi = potential_update(phi, [m.phi for m in inbox], ep.d)
        else:
            status, phi = Status.LOW, ell
        if pc.rnd == ep.r:
            if pc.phase == 1 and status == Status.PROBING and phi > ep.tau:
                status, phi = Status.LOW, ell
                ev |= Event.ALARM_THRESHOLD | Event.STATUS_CHANGE
            if state.role == Role.BLACK and status == Status.PROBING:
                rho += phi
                phi = 0.0
                ev |= Event.CONSUME
            if pc.phase == ep.p:
                if state.role == Role.BLACK and status == Status.PROBING:
                    status = classify_rho(rho, ep.k, ep.ell, ep.gamma)
                    ev |= Event.STATUS_CHANGE
                st["pc"] = Pc(Stage.DISSEMINATION, 0, 1)
            else:
                st["pc"] = Pc(Stage.AVERAGING, pc.phase + 1, 1)
        else:
            st["pc"] = Pc(Stage.AVERAGING, pc.phase, pc.rnd + 1)
        st.update(phi=phi, rho=rho, status=status)
    else:  # dissemination
        status, heard = state.status, state.heard
        for m in inbox:
            if m.status == Status.PROBING:
                continue
            if heard is None:
                heard = m.status
            elif m.status != heard:
                if cfg.strict and state.role == Role.WHITE:
                    raise ProtocolConflict(f"white node heard {heard.name} and {m.status.name} at k={ep.k}")
        if state.role == Role.WHITE and heard is not None:
            if status == Status.PROBING:
                status = heard
                ev |= Event.STATUS_CHANGE
            elif status != heard and cfg.strict:
                raise ProtocolConflict(f"white node is {status.name} but heard {heard.name} at k={ep.k}")
        st.update(status=status, heard=heard)
        if pc.rnd < ep.d:
            st["pc"] = Pc(Stage.DISSEMINATION, 0, pc.rnd + 1)
        else:
            ev |= _epoch_end(state, status, st, rex)
    st["events"] = ev
    new = dataclasses.replace(state, **st)
    return new, message_of(new)


def _epoch_end(state: NodeState, status: Status, st: dict, rex: int) -> Event:
    cfg, k = state.cfg, state.est.k
    if status == Status.DONE:
        return _leave_loop(st, k, rex, cfg)
    verdict = "high" if status == Status.HIGH else "low"  # a silent white moves on as if low
    try:
        est = update_estimate(verdict, state.est)
    except SearchInconsistency:
        if cfg.cap == 0:
            raise
        return _leave_loop(st, 0, rex, cfg)
    if cfg.cap and est.k > cfg.cap:
        return _leave_loop(st, 0, rex, cfg)
    st.update(_epoch_start(state.role, est, cfg))
    return Event.NONE


# ---------------------------------------------------------------------------
# reference world


class World:
    """Drive ``n`` nodes through synchronous rounds against one adversary.

    ``lanes`` > 1 runs independent protocol instances (with their own roles)
    over the same topology sequence; a round's wire message is the tuple of
    per-lane messages.
    """

    def __init__(
        self,
        roles: Sequence[Sequence[str]] | Sequence[str],
        cfg: ProtocolConfig,
        adversary: AdversarySpec,
        *,
        record: bool = True,
    ):
        if roles and isinstance(roles[0], str):
            roles = [roles]
        self.lane_roles = [list(r) for r in roles]
        self.n = len(self.lane_roles[0])
        self.cfg = cfg
        self.adversary = adversary
        self.round = 0
        self.lanes = [[initial_state(r, cfg) for r in rs] for rs in self.lane_roles]
        self.record = record
        self.history: list[list[list[NodeState]]] = [[list(l) for l in self.lanes]] if record else []
        self.topologies: list[Topology] = []
        self.inboxes: list[list[list[tuple]]] = []

    def public_trace(self):
        return {"round": self.round, "lanes": self.lanes, "history": self.history}

    def step(self) -> Topology:
        topo = next_topology(self.adversary, self.round + 1, self.public_trace(), self.n)
        nb = topo.neighbors()
        new_lanes, lane_inboxes = [], []
        for lane in self.lanes:
            outgoing = [message_of(s) for s in lane]
            inboxes = [tuple(sorted(outgoing[u] for u in nb[v] if outgoing[u] is not None)) for v in range(self.n)]
            new_lanes.append([mmc_round(s, ib)[0] for s, ib in zip(lane, inboxes)])
            lane_inboxes.append(inboxes)
        self.lanes = new_lanes
        self.round += 1
        if self.cfg.strict and self.cfg.cap == 0:
            for lane in self.lanes:
                pos = {(s.est, s.pc) for s in lane}
                if len(pos) > 1:
                    raise LockstepError(f"round {self.round}: nodes disagree on position {sorted(pos, key=str)[:2]}")
        if self.record:
            self.history.append([list(l) for l in self.lanes])
            self.topologies.append(topo)
            self.inboxes.append(lane_inboxes)
        return topo

    @property
    def done(self) -> bool:
        return all(s.stopped for lane in self.lanes for s in lane)

    def run(self, max_rounds: int) -> "World":
        while not self.done:
            if self.round >= max_rounds:
                raise RoundBudgetExceeded(f"no stop within {max_rounds} rounds", self)
            self.step()
        return self


# ---------------------------------------------------------------------------
# driver


@dataclass
class EpochSummary:
    """What happened in one epoch of one run (lockstep runs only)."""

    k: int
    start_round: int
    end_round: int
    start_total: float
    conservation_max_dev: float
    conservation_rounds: int
    phi_min: float
    phi_max: float
    phase1_end_round: int
    phase1_max_phi: float
    phase1_above_tau: int
    all_low_round: int
    black_rho: list
    black_verdict: list
    verdict: str

    def to_json(self):
        return dataclasses.asdict(self)


@dataclass
class RunResult:
    n: int
    ell: int
    epsilon: float
    mode: Mode
    adversary: AdversarySpec
    counts: list
    stop_rounds: list
    total_rounds: int
    epochs: list
    simulated_rounds: int
    skipped_rounds: int
    exact: bool
    trace: Any = None

    @property
    def all_correct(self) -> bool:
        return all(c == self.n for c in self.counts)

    @property
    def synchronized(self) -> bool:
        return len(set(self.stop_rounds)) == 1

    def summary(self) -> dict:
        return {
            "protocol": "mmc",
            "n": self.n,
            "ell": self.ell,
            "epsilon": self.epsilon,
            "mode": self.mode.to_json(),
            "adversary": self.adversary.to_json(),
            "counts": list(self.counts),
            "stop_rounds": list(self.stop_rounds),
            "total_rounds": self.total_rounds,
            "simulated_rounds": self.simulated_rounds,
            "skipped_rounds": self.skipped_rounds,
            "exact": self.exact,
            "epochs": [e.to_json() for e in self.epochs],
        }


def default_roles(n: int, ell: int) -> list[str]:
    return [BLACK] * ell + ["white"] * (n - ell)


def run_mmc(
    n: int,
    ell: int,
    epsilon: float,
    adv: AdversarySpec,
    mode: Mode = PAPER,
    *,
    roles: Sequence[str] | None = None,
    ell_param: int | None = None,
    round_budget: int | None = None,
    record: bool = False,
    exact: bool = False,
    engine: str = "kernel",
) -> RunResult:
    """Run the counting protocol until every node stops.

    ``roles`` places the black nodes (default: nodes ``0..ell-1``).
    ``ell_param`` overrides the black count the protocol is told, which the
    indistinguishability fixtures need.  ``exact`` turns off the approximate
    fast-forward of quiescent phases.
    """
    if n < 2:
        raise ValueError("need n >= 2")
    if not n > ell >= 1:
        raise ValueError(f"need n > ell >= 1, got n={n}, ell={ell}")
    if roles is None:
        roles = default_roles(n, ell)
    if len(roles) != n or sum(r == BLACK for r in roles) != ell:
        raise ValueError("roles must list n nodes with exactly ell black ones")
    cfg = ProtocolConfig(ell if ell_param is None else ell_param, float(epsilon), mode)
    if engine == "reference" or not adv.oblivious:
        return _run_reference(n, ell, cfg, adv, roles, round_budget, record)
    from .engine import run_lanes

    out = run_lanes(n, [list(roles)], cfg, adv, round_budget=round_budget, record=record, exact=exact)
    lane = out.lanes[0]
    return RunResult(
        n, ell, float(epsilon), mode, adv,
        counts=lane.results, stop_rounds=lane.stop_rounds, total_rounds=out.rounds,
        epochs=lane.epochs, simulated_rounds=out.simulated, skipped_rounds=out.skipped,
        exact=exact or out.skipped == 0, trace=out.trace,
    )


def _run_reference(n, ell, cfg, adv, roles, round_budget, record) -> RunResult:
    from .analysis import RunTrace

    world = World(roles, cfg, adv, record=True)
    world.run(round_budget or 10**9)
    lane = world.lanes[0]
    stop_rounds = []
    for v in range(n):
        for t, snap in enumerate(world.history):
            if snap[0][v].stopped:
                stop_rounds.append(t)
                break
    trace = RunTrace.from_world(world) if record else None
    return RunResult(
        n, ell, cfg.epsilon, cfg.mode, adv,
        counts=[s.result for s in lane], stop_rounds=stop_rounds, total_rounds=world.round,
        epochs=[], simulated_rounds=world.round, skipped_rounds=0, exact=True, trace=trace,
    )
