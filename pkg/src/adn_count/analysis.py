"""Run traces, invariant checkers, history comparison, and dynamic-graph metrics.

A :class:`RunTrace` stores one lane's node variables after every round in
columnar form: ``data[i, f, v]`` is field ``REC_FIELDS[f]`` of node ``v``
after ``rounds[i]``.  Row 0 is the state before the first round.

Checkers return plain JSON-ready reports
``{"check", "pass", "first_violation_round", "details"}``.
"""

from __future__ import annotations

import hashlib
import json
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .engine import INF_CODE, NREC, REC_FIELDS
from .mmc import EpochSummary, Event, ProtocolConfig, Role, Stage, Status
from .netsim import BLACK, AdversarySpec, Topology, next_topology
from .params import INF, Mode

__all__ = [
    "RunTrace",
    "TraceBuilder",
    "Diagnostics",
    "check_conservation",
    "check_potential_bounds",
    "check_rho_regions",
    "check_threshold_alarms",
    "summarize_epochs",
    "compare_color_histories",
    "compute_dynamic_metrics",
    "slack",
    "report",
    "run_all_checks",
]

CONSERVATION_TOL = 1e-9
BOUND_TOL = 1e-12
F = {name: i for i, name in enumerate(REC_FIELDS)}


def report(check: str, ok: bool, first: int | None = None, **details) -> dict:
    out = {"check": check, "pass": bool(ok)}
    if first is not None:
        out["first_violation_round"] = int(first)
    out["details"] = details
    return out


# ---------------------------------------------------------------------------
# traces


@dataclass
class RunTrace:
    config: dict
    roles: list
    rounds: np.ndarray
    data: np.ndarray
    topologies: list | None = None  # explicit per-row topologies; None when regenerable

    def __post_init__(self):
        if len(self.rounds) and np.any(np.diff(self.rounds) <= 0):
            raise ValueError("trace rounds must be strictly increasing")
        if self.data.shape[1:] != (NREC, len(self.roles)):
            raise ValueError("trace data does not match the node count")

    @property
    def n(self) -> int:
        return len(self.roles)

    @property
    def ell(self) -> int:
        return int(self.config["ell"])

    def field(self, name: str) -> np.ndarray:
        return self.data[:, F[name], :]

    @property
    def adversary(self) -> AdversarySpec:
        return AdversarySpec.from_json(self.config["adversary"])

    def topology_at(self, i: int) -> Topology:
        """Topology of the round that produced row ``i`` (``i >= 1``)."""
        if self.topologies is not None:
            return self.topologies[i]
        return next_topology(self.adversary, int(self.rounds[i]), None, self.n)

    def messages(self, i: int) -> list:
        """What each node broadcast after row ``i``: ``(status, phi, b)`` or None if stopped."""
        row = self.data[i]
        out = []
        for v in range(self.n):
            if row[F["stage"], v] == Stage.STOPPED:
                out.append(None)
            else:
                out.append((int(row[F["status"], v]), float(row[F["phi"], v]), bool(row[F["b"], v])))
        return out

    def inboxes(self, i: int) -> list[tuple]:
        """Sorted inbox every node received in the round that produced row ``i``."""
        msgs = self.messages(i - 1)
        nb = self.topology_at(i).neighbors()
        return [tuple(sorted(msgs[u] for u in nb[v] if msgs[u] is not None)) for v in range(self.n)]

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(self.config, sort_keys=True).encode())
        h.update(json.dumps(self.roles).encode())
        h.update(np.ascontiguousarray(self.rounds, dtype=np.int64).tobytes())
        h.update(np.ascontiguousarray(self.data, dtype=np.float64).tobytes())
        return h.hexdigest()

    # -- serialisation

    def to_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            head = {"config": self.config, "roles": self.roles, "fields": list(REC_FIELDS)}
            fh.write(json.dumps(head) + "\n")
            for i, rnd in enumerate(self.rounds):
                rec = {"round": int(rnd)}
                for name, col in F.items():
                    vals = self.data[i, col]
                    rec[name] = [float(x) for x in vals] if name in ("phi", "rho") else [int(x) for x in vals]
                if self.topologies is not None and i > 0:
                    rec["edges"] = [list(e) for e in self.topologies[i].edges]
                fh.write(json.dumps(rec) + "\n")

    @classmethod
    def from_jsonl(cls, path) -> "RunTrace":
        with open(path) as fh:
            head = json.loads(fh.readline())
            if list(head["fields"]) != list(REC_FIELDS):
                raise ValueError("trace fields do not match this version")
            rounds, rows, topos = [], [], []
            n = len(head["roles"])
            for line in fh:
                if not line.strip():
                    continue
                rec = json.loads(line)
                rounds.append(rec["round"])
                rows.append([rec[name] for name in REC_FIELDS])
                topos.append(Topology(n, tuple(map(tuple, rec["edges"]))) if "edges" in rec else None)
        explicit = any(t is not None for t in topos)
        return cls(
            head["config"], list(head["roles"]), np.array(rounds, np.int64),
            np.array(rows, dtype=np.float64).reshape(len(rows), NREC, n),
            topos if explicit else None,
        )

    @classmethod
    def from_world(cls, world, lane: int = 0) -> "RunTrace":
        """Convert a reference :class:`~adn_count.mmc.World` history."""
        rows = [_state_rows(snap[lane]) for snap in world.history]
        cfg = _config_dict(world.cfg, world.adversary, world.n)
        topos = [None] + list(world.topologies)
        explicit = not world.adversary.oblivious
        return cls(cfg, list(world.lane_roles[lane]), np.arange(len(rows), dtype=np.int64),
                   np.array(rows), topos if explicit else None)


def _state_rows(states) -> np.ndarray:
    out = np.zeros((NREC, len(states)))
    for v, s in enumerate(states):
        e = s.est
        out[:, v] = (
            s.phi, s.rho, int(s.status), e.k, e.min, INF_CODE if e.max == INF else e.max,
            int(s.pc.stage), s.pc.phase, s.pc.rnd, -1 if s.heard is None else int(s.heard),
            -1 if s.result is None else s.result, float(s.b), int(s.events), s.rounds_executed,
        )
    return out


def _config_dict(cfg: ProtocolConfig, adv: AdversarySpec, n: int) -> dict:
    return {
        "n": n, "ell": cfg.ell, "epsilon": cfg.epsilon, "mode": cfg.mode.to_json(),
        "cap": cfg.cap, "round_max": cfg.round_max, "strict": cfg.strict, "adversary": adv.to_json(),
    }


class TraceBuilder:
    """Accumulates recorded chunks from the kernel."""

    def __init__(self, n, roles, cfg, adv, start_round=0):
        self.config = _config_dict(cfg, adv, n)
        self.roles = list(roles)
        self.rounds: list[np.ndarray] = []
        self.chunks: list[np.ndarray] = []

    def add(self, rounds: np.ndarray, rec: np.ndarray) -> None:
        self.rounds.append(np.asarray(rounds, np.int64))
        self.chunks.append(np.asarray(rec, np.float64))

    def build(self) -> RunTrace:
        return RunTrace(self.config, self.roles, np.concatenate(self.rounds), np.concatenate(self.chunks))


# ---------------------------------------------------------------------------
# invariant checks over traces


def check_conservation(trace: RunTrace, tol: float = CONSERVATION_TOL) -> dict:
    """Total potential stays put while a phase is free of alarms.

    The window of a phase runs from its first round up to, not including,
    the first round in which any node raises an alarm.  Blacks that drain
    at the phase end are credited with what they drained.  Every epoch must
    also start with total ``ell * (n - ell)``.
    """
    n, ell = trace.n, trace.ell
    phi, rho, ev = trace.field("phi"), trace.field("rho"), trace.field("events").astype(np.int64)
    stage, rnd = trace.field("stage"), trace.field("rnd")
    phase = trace.field("phase")
    expect = float(ell * (n - ell))
    first = None
    max_dev, checked, starts = 0.0, 0, 0
    start_bad = []
    s0, free = 0.0, False
    for i in range(len(trace.rounds)):
        at_start = stage[i, 0] == Stage.AVERAGING and phase[i, 0] == 1 and rnd[i, 0] == 1
        if at_start and (i == 0 or stage[i - 1, 0] != Stage.AVERAGING):
            starts += 1
            tot = 0.0
            for x in phi[i]:
                tot += x
            if tot != expect:
                start_bad.append(int(trace.rounds[i]))
                first = int(trace.rounds[i]) if first is None else first
        if i == 0:
            continue
        if stage[i - 1, 0] != Stage.AVERAGING:
            continue
        if rnd[i - 1, 0] == 1:
            s0 = float(np.sum(phi[i - 1]))
            free = True
        if not free:
            continue
        if np.any(ev[i] & (Event.ALARM_DEGREE | Event.ALARM_RECEIVED | Event.ALARM_THRESHOLD)):
            free = False
            continue
        consumed = (ev[i] & Event.CONSUME) != 0
        mid = np.where(consumed, rho[i] - rho[i - 1], phi[i])
        # rho absorbed the drained potential with one rounding, so the
        # difference above is only known to within one ulp of rho
        known = float(np.sum(np.spacing(np.abs(rho[i][consumed]))))
        gap = max(0.0, abs(float(np.sum(mid)) - s0) - known)
        dev = gap / s0 if s0 > 0 else gap
        checked += 1
        max_dev = max(max_dev, dev)
        if dev > tol and first is None:
            first = int(trace.rounds[i])
    return report("conservation", first is None, first, max_relative_deviation=max_dev,
                  rounds_checked=checked, epoch_starts=starts, bad_epoch_starts=start_bad[:10])


def check_potential_bounds(trace: RunTrace, tol: float = BOUND_TOL) -> dict:
    phi = trace.field("phi")
    bad = (phi < -tol) | (phi > trace.ell + tol)
    rows = np.flatnonzero(bad.any(axis=1))
    first = int(trace.rounds[rows[0]]) if len(rows) else None
    return report("potential_bounds", first is None, first, min_phi=float(phi.min()), max_phi=float(phi.max()))


def summarize_epochs(trace: RunTrace) -> list[EpochSummary]:
    """Rebuild per-epoch statistics from a trace (same fields as the kernel's)."""
    n, ell = trace.n, trace.ell
    cfg = ProtocolConfig(ell, float(trace.config["epsilon"]), Mode.from_json(trace.config["mode"]))
    phi, rho, status = trace.field("phi"), trace.field("rho"), trace.field("status")
    stage, phase, rnd, kk = trace.field("stage"), trace.field("phase"), trace.field("rnd"), trace.field("k")
    ev = trace.field("events").astype(np.int64)
    blacks = [v for v, r in enumerate(trace.roles) if r == BLACK]
    cons = {}
    out: list[EpochSummary] = []
    cur = None
    for i in range(len(trace.rounds)):
        R = int(trace.rounds[i])
        if stage[i, 0] == Stage.AVERAGING and phase[i, 0] == 1 and rnd[i, 0] == 1 and (
            i == 0 or stage[i - 1, 0] != Stage.AVERAGING
        ):
            cur = dict(k=int(kk[i, 0]), start=R + 1, total=float(sum(phi[i])), mn=float(phi[i].min()),
                       mx=float(phi[i].max()), p1r=-1, p1m=math.nan, p1a=-1, low=-1, rho=[], cls=[])
        if cur is None or i == 0:
            continue
        prev_stage = stage[i - 1, 0]
        if prev_stage == Stage.AVERAGING:
            ep = cfg.params(int(kk[i - 1, 0]))
            mid = np.where(ev[i] & Event.CONSUME, rho[i] - rho[i - 1], phi[i])
            cur["mn"] = min(cur["mn"], float(mid.min()))
            cur["mx"] = max(cur["mx"], float(mid.max()))
            if phase[i - 1, 0] == 1 and rnd[i - 1, 0] == ep.r:
                vals = np.where(status[i] == Status.LOW, float(ell), mid)
                cur["p1r"], cur["p1m"] = R, float(vals.max())
                cur["p1a"] = int(np.sum(status[i] == Status.LOW) + np.sum((status[i] != Status.LOW) & (mid > ep.tau)))
            if stage[i, 0] == Stage.DISSEMINATION:
                cur["rho"] = [float(rho[i, v]) for v in blacks]
                cur["cls"] = [
                    Status(int(status[i, v])).name.lower() if ev[i, v] & Event.STATUS_CHANGE and not ev[i, v] & 3
                    and not ev[i, v] & Event.ALARM_THRESHOLD and status[i - 1, v] == Status.PROBING else "alarm"
                    for v in blacks
                ]
        if prev_stage in (Stage.AVERAGING, Stage.DISSEMINATION) and cur["low"] < 0:
            live = stage[i] != Stage.STOPPED
            if live.any() and np.all(status[i][live] == Status.LOW):
                cur["low"] = R
        if prev_stage == Stage.DISSEMINATION and stage[i, 0] != Stage.DISSEMINATION:
            last_status = int(status[i - 1, 0]) if stage[i, 0] == Stage.AVERAGING else int(status[i, 0])
            verdict = Status(last_status).name.lower()
            out.append(EpochSummary(
                k=cur["k"], start_round=cur["start"], end_round=R, start_total=cur["total"],
                conservation_max_dev=math.nan, conservation_rounds=-1, phi_min=cur["mn"], phi_max=cur["mx"],
                phase1_end_round=cur["p1r"], phase1_max_phi=cur["p1m"], phase1_above_tau=cur["p1a"],
                all_low_round=cur["low"], black_rho=cur["rho"], black_verdict=cur["cls"],
                verdict="silent" if verdict == "probing" else verdict,
            ))
    return out


def _predicted_region(k: int, n: int, epsilon: float) -> str | None:
    if k == n:
        return "band"
    if k > n:
        return "below"
    if n <= k ** (1.0 + epsilon):
        return "above"
    return None


def check_rho_regions(epochs: Iterable[EpochSummary], n: int, ell: int, epsilon: float, gamma_of=None) -> dict:
    """Accumulator lands where the relation between ``k`` and ``n`` says it should.

    ``k == n``: inside the band; ``k < n <= k^(1+eps)``: above it;
    ``k > n``: below it.  Epochs in which a black node raised an alarm are
    not probing epochs and are skipped.
    """
    from .params import derive_epoch_params

    first, checked, bad = None, 0, []
    for e in epochs:
        region = _predicted_region(e.k, n, epsilon)
        if region is None or not e.black_rho or any(v == "alarm" for v in e.black_verdict):
            continue
        gamma = derive_epoch_params(e.k, ell, epsilon).gamma
        w = e.k ** (-gamma)
        lo, hi = (e.k - ell) * (1 - w), (e.k - ell) * (1 + w)
        for r in e.black_rho:
            checked += 1
            ok = (lo <= r <= hi) if region == "band" else (r > hi if region == "above" else r < lo)
            if not ok:
                bad.append({"k": e.k, "rho": r, "band": [lo, hi], "expected": region})
                first = e.end_round if first is None else first
    return report("rho_regions", not bad, first, checked=checked, violations=bad[:10])


def check_threshold_alarms(epochs: Iterable[EpochSummary], n: int, ell: int, epsilon: float) -> dict:
    """Underestimates raise the threshold alarm and every node goes low soon after.

    For ``k^(1+eps) < n``: some node exceeds the threshold at the end of
    phase 1, and all nodes are low within ``k^(1+eps)`` rounds of it.
    For ``k >= n``: no node exceeds the threshold at the end of phase 1.
    """
    first, checked, bad = None, 0, []
    for e in epochs:
        if e.phase1_end_round < 0:
            continue
        kpow = e.k ** (1.0 + epsilon)
        if kpow < n:
            checked += 1
            ok = e.phase1_above_tau >= 1 and 0 <= e.all_low_round <= e.phase1_end_round + kpow
        elif e.k >= n:
            checked += 1
            ok = e.phase1_above_tau == 0
        else:
            continue
        if not ok:
            bad.append({"k": e.k, "above_tau": e.phase1_above_tau, "phase1_end": e.phase1_end_round,
                        "all_low": e.all_low_round})
            first = e.phase1_end_round if first is None else first
    return report("threshold_alarms", not bad, first, checked=checked, violations=bad[:10])


def check_lockstep(trace: RunTrace) -> dict:
    keys = ("k", "kmin", "kmax", "stage", "phase", "rnd")
    cols = np.stack([trace.field(k) for k in keys], axis=1)  # (R, 6, n)
    bad = np.flatnonzero(np.any(cols != cols[:, :, :1], axis=(1, 2)))
    first = int(trace.rounds[bad[0]]) if len(bad) else None
    return report("lockstep", first is None, first)


def check_synchronized_stop(trace: RunTrace) -> dict:
    stopped = trace.field("stage") == Stage.STOPPED
    res = trace.field("result")
    last = stopped[-1]
    ok = bool(last.all()) and len(set(res[-1].tolist())) == 1
    if ok:
        when = [int(np.argmax(stopped[:, v])) for v in range(trace.n)]
        ok = len(set(when)) == 1
    return report("synchronized_stop", ok, None if ok else int(trace.rounds[-1]), outputs=sorted(set(res[-1].tolist())))


def run_all_checks(trace: RunTrace) -> list[dict]:
    n, ell, eps = trace.n, trace.ell, float(trace.config["epsilon"])
    epochs = summarize_epochs(trace)
    out = [check_conservation(trace), check_potential_bounds(trace)]
    if trace.config.get("cap", 0) == 0:
        paper = Mode.from_json(trace.config["mode"]).is_paper
        out.append(check_lockstep(trace))
        out.append(check_synchronized_stop(trace))
        if paper:
            out.append(check_rho_regions(epochs, n, ell, eps))
            out.append(check_threshold_alarms(epochs, n, ell, eps))
    return out


# ---------------------------------------------------------------------------
# indistinguishability


def _history_keys(trace: RunTrace, lo: int, hi: int, maxdeg: int) -> np.ndarray:
    """Rows ``[round, state bits..., inbox bits...]`` for every node in rows ``lo..hi-1``."""
    n = trace.n
    width = 1 + NREC + 3 * maxdeg
    out = np.full((hi - lo, n, width), -(2**63), dtype=np.int64)
    bits = trace.data.view(np.int64)
    static = trace.adversary.static and trace.topologies is None
    nb_static = trace.topology_at(1).neighbors() if static and len(trace.rounds) > 1 else None
    for j, i in enumerate(range(lo, hi)):
        out[j, :, 0] = trace.rounds[i]
        out[j, :, 1 : 1 + NREC] = bits[i].T
        if i == 0:
            continue
        nb = nb_static if nb_static is not None else trace.topology_at(i).neighbors()
        prev = trace.data[i - 1]
        for v in range(n):
            msgs = sorted(
                (prev[F["status"], u], prev[F["phi"], u], prev[F["b"], u])
                for u in nb[v] if prev[F["stage"], u] != Stage.STOPPED
            )
            if len(msgs) > maxdeg:
                raise ValueError("inbox larger than the comparison width")
            if msgs:
                arr = np.array(msgs, dtype=np.float64).view(np.int64).ravel()
                out[j, v, 1 + NREC : 1 + NREC + arr.size] = arr
    return out


def compare_color_histories(trace_a: RunTrace, trace_b: RunTrace, T: int | None = None, chunk: int = 4096) -> dict:
    """Do black nodes (and white nodes) see the same histories in both traces?

    For each round up to ``T`` and each colour, the set of distinct
    ``(state, inbox)`` pairs must coincide, bit for bit.  Multiplicities are
    not compared: the two fixtures have different node counts by design.
    """
    rows = min(len(trace_a.rounds), len(trace_b.rounds))
    if T is not None:
        rows = min(rows, T + 1)
    if not np.array_equal(trace_a.rounds[:rows], trace_b.rounds[:rows]):
        return report("color_histories", False, 0, reason="round numbering differs")
    maxdeg = trace_a.n + trace_b.n
    colors = {}
    for name, tr in (("a", trace_a), ("b", trace_b)):
        colors[name] = {c: np.array([r == c for r in tr.roles]) for c in (BLACK, "white")}
    for lo in range(0, rows, chunk):
        hi = min(rows, lo + chunk)
        ka = _history_keys(trace_a, lo, hi, maxdeg)
        kb = _history_keys(trace_b, lo, hi, maxdeg)
        for c in (BLACK, "white"):
            ma, mb = colors["a"][c], colors["b"][c]
            if ma.any() != mb.any():
                return report("color_histories", False, int(trace_a.rounds[lo]), color=c, reason="colour missing")
            ua = np.unique(ka[:, ma].reshape(-1, ka.shape[2]), axis=0)
            ub = np.unique(kb[:, mb].reshape(-1, kb.shape[2]), axis=0)
            if ua.shape == ub.shape and np.array_equal(ua, ub):
                continue
            for j in range(hi - lo):
                sa = {tuple(x) for x in ka[j, ma]}
                sb = {tuple(x) for x in kb[j, mb]}
                if sa != sb:
                    return report("color_histories", False, int(trace_a.rounds[lo + j]), color=c)
    return report("color_histories", True, None, rounds_compared=rows - 1)


# ---------------------------------------------------------------------------
# dynamic-graph diagnostics


@dataclass
class Diagnostics:
    d_max: int
    D_per_round: list
    chronopath: int
    slack: list = field(default_factory=list)

    def to_json(self):
        return {"d_max": self.d_max, "D_per_round": self.D_per_round, "chronopath": self.chronopath}


def _eccentricities(topo: Topology) -> list[int]:
    nb = topo.neighbors()
    ecc = []
    for s in range(topo.n):
        dist = [-1] * topo.n
        dist[s] = 0
        q = deque([s])
        while q:
            u = q.popleft()
            for w in nb[u]:
                if dist[w] < 0:
                    dist[w] = dist[u] + 1
                    q.append(w)
        ecc.append(max(dist))
    return ecc


def compute_dynamic_metrics(topologies: Sequence[Topology]) -> Diagnostics:
    """Max degree, per-round diameter, and the temporal flooding bound.

    The chronopath is the largest number of rounds a flood needs to reach
    every node when it may start at any node and any round of the sequence,
    with the sequence repeated periodically and one hop per round.
    """
    if not topologies:
        raise ValueError("need at least one topology")
    n = topologies[0].n
    if any(t.n != n for t in topologies):
        raise ValueError("all topologies must have the same node count")
    d_max = max(max(t.degrees()) for t in topologies)
    D = [max(_eccentricities(t)) for t in topologies]
    nbs = [t.neighbors() for t in topologies]
    L = len(topologies)
    chrono = 0
    for start in range(L):
        for src in range(n):
            reached = {src}
            steps = 0
            while len(reached) < n:
                nb = nbs[(start + steps) % L]
                reached = reached | {w for u in reached for w in nb[u]}
                steps += 1
            chrono = max(chrono, steps)
    return Diagnostics(d_max, D, chrono)


def slack(trace: RunTrace, every: int = 1) -> list[list[float]]:
    """Per-node ``ell - phi`` snapshots."""
    phi = trace.field("phi")[::every]
    return (trace.ell - phi).tolist()
