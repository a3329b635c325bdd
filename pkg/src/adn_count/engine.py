"""Compiled simulation of many protocol lanes over one shared topology sequence.

The kernel applies exactly the transition of :func:`adn_count.mmc.mmc_round`
to arrays of node variables, for ``T`` independent lanes (protocol
instances) that see the same topology every round.  It also collects the
per-epoch statistics the invariant checks need.

Unscaled parameters make epochs millions of rounds long, so the kernel
fast-forwards stretches whose outcome is known:

* a node that is ``low`` during averaging keeps potential ``ell`` whatever
  it hears, so it can jump to the last averaging round;
* a node idling toward the synchronisation horizon can jump to its last
  round once the black-existence flag has settled;
* a lane in which every node is probing can jump to the last round of its
  phase when averaging is at a fixed point: all potentials are equal, or
  the topology is static and the previous round changed nothing;
* with ``exact=False`` the same jump is also taken once the potentials of
  the lane agree to a relative ``1e-12``, provided no degree alarm can fire.
  This last rule is an approximation at the level of rounding noise.

Fast-forwarding is global: the kernel advances by the smallest jump any
lane allows, so lanes stay aligned on the shared round counter.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numba import njit

from .mmc import EpochSummary, ProtocolConfig, Stage, Status
from .netsim import BLACK, AdversarySpec, fill_topology
from .params import INF, EstimateState

log = logging.getLogger(__name__)

INF_CODE = 1 << 62
QUIESCENCE_TOL = 1e-12

# return codes
DONE = 0
BUDGET = 1
EPOCH_END = 2
RECORD_FULL = 3
ERR_CONFLICT = -1
ERR_INCONSISTENT = -2
ERR_LOCKSTEP = -3
ERR_TABLE = -4

# per-epoch lane statistics
S_K, S_START, S_END, S_TOTAL, S_DEV, S_NCHK, S_MIN, S_MAX = range(8)
S_P1ROUND, S_P1MAX, S_P1ABOVE, S_ALLLOW, S_PSUM, S_FREE = range(8, 14)
NSTAT = 14

# recorded per-node fields
REC_FIELDS = (
    "phi", "rho", "status", "k", "kmin", "kmax", "stage", "phase", "rnd",
    "heard", "result", "b", "events", "rounds_executed",
)
NREC = len(REC_FIELDS)

AVG, DISS, IDLE, STOPPED = int(Stage.AVERAGING), int(Stage.DISSEMINATION), int(Stage.IDLE), int(Stage.STOPPED)
PROBING, LOW, HIGH, DONE_ST = int(Status.PROBING), int(Status.LOW), int(Status.HIGH), int(Status.DONE)


@njit(cache=True)
def _reset_stats(cur, l, k, rnd, total, phi_row, n):
    cur[l, S_K] = k
    cur[l, S_START] = rnd
    cur[l, S_END] = -1
    cur[l, S_TOTAL] = total
    cur[l, S_DEV] = 0.0
    cur[l, S_NCHK] = 0
    mn = phi_row[0]
    mx = phi_row[0]
    for v in range(n):
        mn = min(mn, phi_row[v])
        mx = max(mx, phi_row[v])
    cur[l, S_MIN] = mn
    cur[l, S_MAX] = mx
    cur[l, S_P1ROUND] = -1
    cur[l, S_P1MAX] = np.nan
    cur[l, S_P1ABOVE] = -1
    cur[l, S_ALLLOW] = -1
    cur[l, S_PSUM] = total
    cur[l, S_FREE] = 1


@njit(cache=True)
def _lane_skip(l, n, stage, status, kk, ph, tt, phi, bflag, rexec, round_max, changed,
               static, maxdeg, exact, qtol, d_tab, p_tab, r_tab):
    """Rounds lane ``l`` can fast-forward; ``-1`` means unbounded (stopped)."""
    best = -1
    anyb = -1
    all_probing = True
    k0 = -1
    ph0 = -1
    t0 = -1
    for v in range(n):
        st = stage[l, v]
        if st == STOPPED:
            continue
        b = 1 if bflag[l, v] else 0
        if anyb < 0:
            anyb = b
        elif anyb != b:
            return 0
        if st == DISS:
            return 0
        if st == IDLE:
            s = round_max - rexec[l] - 1
        elif status[l, v] == PROBING:
            if k0 < 0:
                k0, ph0, t0 = kk[l, v], ph[l, v], tt[l, v]
            elif kk[l, v] != k0 or ph[l, v] != ph0 or tt[l, v] != t0:
                return 0
            s = r_tab[kk[l, v]] - tt[l, v]
        else:
            k = kk[l, v]
            s = (r_tab[k] - tt[l, v]) + (p_tab[k] - ph[l, v]) * r_tab[k]
        if s <= 0:
            return 0
        if best < 0 or s < best:
            best = s
    if k0 < 0:
        return best
    # some nodes probe: every live node must probe in the same position
    lo = np.inf
    hi = -np.inf
    big = 0.0
    for v in range(n):
        if stage[l, v] == STOPPED:
            continue
        if stage[l, v] != AVG or status[l, v] != PROBING:
            return 0
        x = phi[l, v]
        lo = min(lo, x)
        hi = max(hi, x)
        big = max(big, abs(x))
    if maxdeg > d_tab[k0] - 1:
        return 0
    fixed = lo == hi or (static and not changed[l])
    if not fixed:
        if exact or hi - lo > qtol * big:
            return 0
    return best


@njit(cache=True)
def _advance(l, n, S, stage, status, ph, tt, kk, phi, rexec, r_tab, cur, R, tau_tab):
    rexec[l] += S
    for v in range(n):
        if stage[l, v] != AVG:
            continue
        r = r_tab[kk[l, v]]
        if v == 0 and ph[l, v] == 1 and tt[l, v] - 1 + S >= r:
            # phase 1 ends inside the jump; only fixed-point lanes get here
            end_round = R + (r - tt[l, v] + 1)
            mx = -np.inf
            above = 0
            for u in range(n):
                mx = max(mx, phi[l, u])
                if phi[l, u] > tau_tab[kk[l, u]]:
                    above += 1
            cur[l, S_P1ROUND] = end_round
            cur[l, S_P1MAX] = mx
            cur[l, S_P1ABOVE] = above
        x = tt[l, v] - 1 + S
        if x >= r:
            cur[l, S_FREE] = 0
        ph[l, v] += x // r
        tt[l, v] = x % r + 1


@njit(cache=True)
def kernel(
    akind, aseed, fadj, fdeg, maxdeg, static,
    ell, cap, round_max, strict, allow_skip, exact, qtol, ret_epoch,
    d_tab, p_tab, r_tab, tau_tab, lo_tab, hi_tab,
    role, phi, rho, status, kk, kmin, kmax, stage, ph, tt, heard, result, bflag, events,
    rexec, changed, stop_round, lane_active,
    cur, last, ep_flag, rho_fin, cls_fin, ep_status,
    ctl, max_round,
    rec_lane, rec, rec_rounds,
):
    T, n = phi.shape
    adj = np.zeros((n, n), dtype=np.int64)
    deg = np.zeros(n, dtype=np.int64)
    buf = np.empty(n, dtype=np.float64)
    mid = np.empty(n, dtype=np.float64)
    n_phi = np.empty(n)
    n_rho = np.empty(n)
    n_status = np.empty(n, dtype=np.int64)
    n_k = np.empty(n, dtype=np.int64)
    n_kmin = np.empty(n, dtype=np.int64)
    n_kmax = np.empty(n, dtype=np.int64)
    n_stage = np.empty(n, dtype=np.int64)
    n_ph = np.empty(n, dtype=np.int64)
    n_t = np.empty(n, dtype=np.int64)
    n_heard = np.empty(n, dtype=np.int64)
    n_result = np.empty(n, dtype=np.int64)
    n_b = np.empty(n, dtype=np.bool_)
    n_ev = np.empty(n, dtype=np.int64)
    tabsize = d_tab.shape[0]
    recording = rec_lane >= 0
    R = ctl[0]

    while True:
        any_active = False
        for l in range(T):
            if lane_active[l]:
                any_active = True
        if not any_active:
            ctl[0] = R
            return DONE
        if R >= max_round:
            ctl[0] = R
            return BUDGET

        # ---- fast-forward
        if allow_skip and not recording:
            S = -1
            for l in range(T):
                if not lane_active[l]:
                    continue
                s = _lane_skip(l, n, stage, status, kk, ph, tt, phi, bflag, rexec, round_max,
                               changed, static, maxdeg, exact, qtol, d_tab, p_tab, r_tab)
                if s >= 0 and (S < 0 or s < S):
                    S = s
                if S == 0:
                    break
            if S > 0:
                if S > max_round - R:
                    S = max_round - R
                for l in range(T):
                    if lane_active[l]:
                        _advance(l, n, S, stage, status, ph, tt, kk, phi, rexec, r_tab, cur, R, tau_tab)
                R += S
                ctl[2] += S
                continue

        # ---- make sure the parameter table covers every estimate reachable this round
        for l in range(T):
            for v in range(n):
                if stage[l, v] == DISS and 2 * kk[l, v] + 2 >= tabsize:
                    ctl[0] = R
                    ctl[4] = 2 * kk[l, v] + 2
                    return ERR_TABLE

        rnd = R + 1
        fill_topology(akind, n, aseed, np.uint64(rnd), fadj, fdeg, adj, deg)
        epoch_seen = False

        for l in range(T):
            if not lane_active[l]:
                continue
            lane_changed = False
            rex = rexec[l] + 1
            for v in range(n):
                st = stage[l, v]
                p_ = phi[l, v]
                rh = rho[l, v]
                stt = status[l, v]
                k = kk[l, v]
                kmn = kmin[l, v]
                kmx = kmax[l, v]
                phv = ph[l, v]
                t = tt[l, v]
                hd = heard[l, v]
                res = result[l, v]
                b = bflag[l, v]
                ev = 0
                mid[v] = p_
                if st != STOPPED:
                    m = 0
                    np_min = 99
                    np_max = -1
                    for i in range(deg[v]):
                        u = adj[v, i]
                        if stage[l, u] == STOPPED:
                            continue
                        su = status[l, u]
                        if su != PROBING:
                            np_min = min(np_min, su)
                            np_max = max(np_max, su)
                        if bflag[l, u]:
                            b = True
                        buf[m] = phi[l, u]
                        m += 1
                    if st == IDLE:
                        if rex >= round_max:
                            st = STOPPED
                            ev |= 32
                    elif st == AVG:
                        d = d_tab[k]
                        if stt == PROBING:
                            if m > d - 1:
                                ev |= 1
                            if np_max >= 0:
                                ev |= 2
                            if ev != 0:
                                stt = LOW
                                p_ = float(ell)
                                ev |= 16
                            else:
                                for i in range(1, m):
                                    key = buf[i]
                                    j = i - 1
                                    while j >= 0 and buf[j] > key:
                                        buf[j + 1] = buf[j]
                                        j -= 1
                                    buf[j + 1] = key
                                s = 0.0
                                for i in range(m):
                                    s += buf[i] - p_
                                p_ = p_ + s / d
                        else:
                            stt = LOW
                            p_ = float(ell)
                        mid[v] = p_
                        if t == r_tab[k]:
                            if phv == 1 and stt == PROBING and p_ > tau_tab[k]:
                                stt = LOW
                                p_ = float(ell)
                                ev |= 4 | 16
                            if role[l, v] == 1 and stt == PROBING:
                                rh += p_
                                p_ = 0.0
                                ev |= 8
                            if phv == p_tab[k]:
                                if role[l, v] == 1:
                                    rho_fin[l, v] = rh
                                    cls_fin[l, v] = -1
                                    if stt == PROBING:
                                        if rh < lo_tab[k]:
                                            stt = HIGH
                                        elif rh > hi_tab[k]:
                                            stt = LOW
                                        else:
                                            stt = DONE_ST
                                        cls_fin[l, v] = stt
                                        ev |= 16
                                st = DISS
                                phv = 0
                                t = 1
                            else:
                                phv += 1
                                t = 1
                        else:
                            t += 1
                    else:  # dissemination
                        d = d_tab[k]
                        if np_max >= 0:
                            h = hd if hd >= 0 else np_min
                            if (np_min != h or np_max != h) and strict and role[l, v] == 0:
                                ctl[0] = R
                                ctl[4] = l
                                return ERR_CONFLICT
                            hd = h
                        if role[l, v] == 0 and hd >= 0:
                            if stt == PROBING:
                                stt = hd
                                ev |= 16
                            elif stt != hd and strict:
                                ctl[0] = R
                                ctl[4] = l
                                return ERR_CONFLICT
                        if t < d:
                            t += 1
                        else:
                            ep_status[l, v] = stt
                            leave = -1
                            if stt == DONE_ST:
                                leave = k
                            else:
                                bad = False
                                if stt == HIGH:
                                    lo = kmn
                                    hi = k - 1
                                    if lo > hi:
                                        bad = True
                                    nk = (lo + hi) // 2
                                else:
                                    lo = k + 1
                                    hi = kmx
                                    if hi == INF_CODE:
                                        nk = 2 * k
                                    else:
                                        nk = (lo + hi) // 2
                                        if lo > hi:
                                            bad = True
                                if bad:
                                    if cap == 0:
                                        ctl[0] = R
                                        ctl[4] = l
                                        return ERR_INCONSISTENT
                                    leave = 0
                                elif cap > 0 and nk > cap:
                                    leave = 0
                                else:
                                    k = nk
                                    kmn = lo
                                    kmx = hi
                                    p_ = 0.0 if role[l, v] == 1 else float(ell)
                                    rh = 0.0
                                    stt = PROBING
                                    st = AVG
                                    phv = 1
                                    t = 1
                                    hd = -1
                            if leave >= 0:
                                res = leave
                                phv = 0
                                t = 0
                                if cap > 0 and rex < round_max:
                                    st = IDLE
                                else:
                                    st = STOPPED
                                    ev |= 32
                if (ev & 32) != 0:
                    stop_round[l, v] = rnd
                if p_ != phi[l, v] or stt != status[l, v] or b != bflag[l, v]:
                    lane_changed = True
                n_phi[v] = p_
                n_rho[v] = rh
                n_status[v] = stt
                n_k[v] = k
                n_kmin[v] = kmn
                n_kmax[v] = kmx
                n_stage[v] = st
                n_ph[v] = phv
                n_t[v] = t
                n_heard[v] = hd
                n_result[v] = res
                n_b[v] = b
                n_ev[v] = ev

            # ---- lane statistics, keyed on node 0's position before the round
            st0 = stage[l, 0]
            if st0 == AVG:
                k0 = kk[l, 0]
                total = 0.0
                for v in range(n):
                    total += mid[v]
                    cur[l, S_MIN] = min(cur[l, S_MIN], mid[v])
                    cur[l, S_MAX] = max(cur[l, S_MAX], mid[v])
                alarm = False
                for v in range(n):
                    if (n_ev[v] & 3) != 0:
                        alarm = True
                if cur[l, S_FREE] == 1 and not alarm:
                    s0 = cur[l, S_PSUM]
                    dev = abs(total - s0) / s0 if s0 > 0 else abs(total - s0)
                    cur[l, S_DEV] = max(cur[l, S_DEV], dev)
                    cur[l, S_NCHK] += 1
                else:
                    cur[l, S_FREE] = 0
                if tt[l, 0] == r_tab[k0] and ph[l, 0] == 1:
                    mx = -np.inf
                    above = 0
                    for v in range(n):
                        mx = max(mx, mid[v])
                        if mid[v] > tau_tab[k0]:
                            above += 1
                    cur[l, S_P1ROUND] = rnd
                    cur[l, S_P1MAX] = mx
                    cur[l, S_P1ABOVE] = above
            if st0 == AVG or st0 == DISS:
                if cur[l, S_ALLLOW] < 0:
                    all_low = False
                    for v in range(n):
                        if n_stage[v] != STOPPED:
                            if n_status[v] != LOW:
                                all_low = False
                                break
                            all_low = True
                    if all_low:
                        cur[l, S_ALLLOW] = rnd

            # ---- commit the lane
            alive = False
            for v in range(n):
                phi[l, v] = n_phi[v]
                rho[l, v] = n_rho[v]
                status[l, v] = n_status[v]
                kk[l, v] = n_k[v]
                kmin[l, v] = n_kmin[v]
                kmax[l, v] = n_kmax[v]
                stage[l, v] = n_stage[v]
                ph[l, v] = n_ph[v]
                tt[l, v] = n_t[v]
                heard[l, v] = n_heard[v]
                result[l, v] = n_result[v]
                bflag[l, v] = n_b[v]
                events[l, v] = n_ev[v]
                if n_stage[v] != STOPPED:
                    alive = True
            rexec[l] = rex
            changed[l] = lane_changed
            lane_active[l] = alive

            # ---- phase and epoch boundaries (node 0 leads)
            if st0 == AVG and stage[l, 0] == AVG and tt[l, 0] == 1:
                total = 0.0
                for v in range(n):
                    total += phi[l, v]
                cur[l, S_PSUM] = total
                cur[l, S_FREE] = 1
            if st0 == DISS and stage[l, 0] != DISS:
                for j in range(NSTAT):
                    last[l, j] = cur[l, j]
                last[l, S_END] = rnd
                ep_flag[l] = True
                epoch_seen = True
                if stage[l, 0] == AVG:
                    total = 0.0
                    for v in range(n):
                        total += phi[l, v]
                    _reset_stats(cur, l, kk[l, 0], rnd + 1, total, phi[l], n)

            if strict and cap == 0:
                for v in range(1, n):
                    if (kk[l, v] != kk[l, 0] or kmin[l, v] != kmin[l, 0] or kmax[l, v] != kmax[l, 0]
                            or stage[l, v] != stage[l, 0] or ph[l, v] != ph[l, 0] or tt[l, v] != tt[l, 0]):
                        ctl[0] = rnd
                        ctl[4] = l
                        return ERR_LOCKSTEP

        R = rnd
        ctl[1] += 1
        if recording:
            i = ctl[3]
            l = rec_lane
            rec_rounds[i] = R
            for v in range(n):
                rec[i, 0, v] = phi[l, v]
                rec[i, 1, v] = rho[l, v]
                rec[i, 2, v] = status[l, v]
                rec[i, 3, v] = kk[l, v]
                rec[i, 4, v] = kmin[l, v]
                rec[i, 5, v] = kmax[l, v]
                rec[i, 6, v] = stage[l, v]
                rec[i, 7, v] = ph[l, v]
                rec[i, 8, v] = tt[l, v]
                rec[i, 9, v] = heard[l, v]
                rec[i, 10, v] = result[l, v]
                rec[i, 11, v] = 1.0 if bflag[l, v] else 0.0
                rec[i, 12, v] = events[l, v]
                rec[i, 13, v] = rexec[l]
            ctl[3] = i + 1
            if i + 1 == rec.shape[0]:
                ctl[0] = R
                return RECORD_FULL
        if epoch_seen and ret_epoch:
            ctl[0] = R
            return EPOCH_END


# ---------------------------------------------------------------------------
# python driver


class KernelError(RuntimeError):
    def __init__(self, code: int, round: int, lane: int):
        names = {
            ERR_CONFLICT: "conflicting verdicts heard",
            ERR_INCONSISTENT: "estimate range became empty",
            ERR_LOCKSTEP: "nodes fell out of lockstep",
        }
        super().__init__(f"{names.get(code, code)} (round {round}, lane {lane})")
        self.code, self.round, self.lane = code, round, lane


@dataclass
class LaneResult:
    results: list
    stop_rounds: list
    black_flags: list
    epochs: list = field(default_factory=list)


@dataclass
class LanesOutput:
    lanes: list
    rounds: int
    simulated: int
    skipped: int
    status: str
    trace: object = None


class ParamTable:
    """Per-estimate constants in array form, grown on demand."""

    def __init__(self, cfg: ProtocolConfig, size: int):
        self.cfg = cfg
        self.size = 0
        self.d = self.p = self.r = np.zeros(0, np.int64)
        self.tau = self.lo = self.hi = np.zeros(0)
        self.grow(size)

    def grow(self, size: int):
        size = max(size, self.size)
        d = np.zeros(size, np.int64)
        p = np.ones(size, np.int64)
        r = np.ones(size, np.int64)
        tau, lo, hi = np.zeros(size), np.zeros(size), np.zeros(size)
        for k in range(self.cfg.ell + 1, size):
            ep = self.cfg.params(k)
            d[k], p[k], r[k], tau[k] = ep.d, ep.p, ep.r, ep.tau
            lo[k], hi[k] = ep.band
        self.d, self.p, self.r, self.tau, self.lo, self.hi, self.size = d, p, r, tau, lo, hi, size


class LaneSim:
    """Arrays and bookkeeping for one batch of lanes; drive it with :meth:`run`."""

    def __init__(
        self,
        n: int,
        lane_roles: Sequence[Sequence[str]],
        cfg: ProtocolConfig,
        adv: AdversarySpec,
        *,
        start_round: int = 0,
        exact: bool = False,
        allow_skip: bool = True,
        table_size: int | None = None,
    ):
        self.n, self.cfg, self.adv = n, cfg, adv
        T = len(lane_roles)
        self.T = T
        self.role = np.array([[1 if r == BLACK else 0 for r in rs] for rs in lane_roles], dtype=np.int64)
        if self.role.shape != (T, n):
            raise ValueError("every lane needs one role per node")
        ell = cfg.ell
        self.phi = np.where(self.role == 1, 0.0, float(ell))
        self.rho = np.zeros((T, n))
        self.status = np.zeros((T, n), np.int64)
        self.kk = np.full((T, n), ell + 1, np.int64)
        self.kmin = np.full((T, n), ell + 1, np.int64)
        self.kmax = np.full((T, n), INF_CODE, np.int64)
        self.stage = np.zeros((T, n), np.int64)
        self.ph = np.ones((T, n), np.int64)
        self.tt = np.ones((T, n), np.int64)
        self.heard = np.full((T, n), -1, np.int64)
        self.result = np.full((T, n), -1, np.int64)
        self.bflag = self.role == 1
        self.events = np.zeros((T, n), np.int64)
        self.rexec = np.zeros(T, np.int64)
        self.changed = np.ones(T, np.bool_)
        self.stop_round = np.full((T, n), -1, np.int64)
        self.lane_active = np.ones(T, np.bool_)
        self.cur = np.zeros((T, NSTAT))
        self.last = np.zeros((T, NSTAT))
        self.ep_flag = np.zeros(T, np.bool_)
        self.rho_fin = np.zeros((T, n))
        self.cls_fin = np.full((T, n), -1, np.int64)
        self.ep_status = np.full((T, n), -1, np.int64)
        self.ctl = np.array([start_round, 0, 0, 0, 0], np.int64)
        self.start_round = start_round
        for l in range(T):
            self._reset(l)
        self.table = ParamTable(cfg, table_size or max(4 * n + 4, 2 * cfg.cap + 3, 2 * ell + 6))
        akind, aseed, fadj, fdeg = adv.kernel_args(n)
        self.adv_args = (akind, np.uint64(aseed), fadj, fdeg, adv.max_degree(n), adv.static)
        self.exact = exact
        self.allow_skip = allow_skip
        self.epochs: list[list[EpochSummary]] = [[] for _ in range(T)]

    def _reset(self, l):
        total = 0.0
        for x in self.phi[l]:
            total += x
        _reset_stats(self.cur, l, self.cfg.ell + 1, self.ctl[0] + 1, total, self.phi[l], self.n)

    @property
    def round(self) -> int:
        return int(self.ctl[0])

    def _harvest(self):
        for l in np.flatnonzero(self.ep_flag):
            s = self.last[l]
            blacks = np.flatnonzero(self.role[l] == 1)
            verdicts = [Status(int(c)).name.lower() if c >= 0 else "alarm" for c in self.cls_fin[l, blacks]]
            lane_verdict = Status(int(self.ep_status[l, 0])).name.lower()
            self.epochs[l].append(
                EpochSummary(
                    k=int(s[S_K]), start_round=int(s[S_START]), end_round=int(s[S_END]),
                    start_total=float(s[S_TOTAL]), conservation_max_dev=float(s[S_DEV]),
                    conservation_rounds=int(s[S_NCHK]), phi_min=float(s[S_MIN]), phi_max=float(s[S_MAX]),
                    phase1_end_round=int(s[S_P1ROUND]), phase1_max_phi=float(s[S_P1MAX]),
                    phase1_above_tau=int(s[S_P1ABOVE]), all_low_round=int(s[S_ALLLOW]),
                    black_rho=[float(x) for x in self.rho_fin[l, blacks]], black_verdict=verdicts,
                    verdict="silent" if lane_verdict == "probing" else lane_verdict,
                )
            )
        self.ep_flag[:] = False

    def run(self, max_round: int, *, record_lane: int = -1, record_chunk: int = 4096, on_record=None) -> str:
        """Simulate until all lanes stop or the absolute round ``max_round`` is reached."""
        cfg = self.cfg
        rec = np.zeros((record_chunk if record_lane >= 0 else 1, NREC, self.n))
        rec_rounds = np.zeros(rec.shape[0], np.int64)
        while True:
            self.ctl[3] = 0
            code = kernel(
                *self.adv_args,
                cfg.ell, cfg.cap, cfg.round_max, cfg.strict, self.allow_skip, self.exact, QUIESCENCE_TOL, True,
                self.table.d, self.table.p, self.table.r, self.table.tau, self.table.lo, self.table.hi,
                self.role, self.phi, self.rho, self.status, self.kk, self.kmin, self.kmax, self.stage,
                self.ph, self.tt, self.heard, self.result, self.bflag, self.events,
                self.rexec, self.changed, self.stop_round, self.lane_active,
                self.cur, self.last, self.ep_flag, self.rho_fin, self.cls_fin, self.ep_status,
                self.ctl, max_round, record_lane, rec, rec_rounds,
            )
            if record_lane >= 0 and self.ctl[3] and on_record is not None:
                m = int(self.ctl[3])
                on_record(rec_rounds[:m].copy(), rec[:m].copy())
            if code == EPOCH_END:
                self._harvest()
                continue
            if code == RECORD_FULL:
                continue
            if code == ERR_TABLE:
                self.table.grow(max(2 * self.table.size, int(self.ctl[4]) + 1))
                log.debug("parameter table grown to %d", self.table.size)
                continue
            if code < 0:
                raise KernelError(code, int(self.ctl[0]), int(self.ctl[4]))
            self._harvest()
            return "done" if code == DONE else "budget"

    def lane_result(self, l: int) -> LaneResult:
        res = [None if x < 0 else int(x) for x in self.result[l]]
        return LaneResult(res, [int(x) for x in self.stop_round[l]], [bool(x) for x in self.bflag[l]], self.epochs[l])

    def snapshot(self, l: int) -> np.ndarray:
        """The lane's node fields in :data:`REC_FIELDS` order, shape ``(NREC, n)``."""
        return np.stack([
            self.phi[l], self.rho[l], self.status[l], self.kk[l], self.kmin[l], self.kmax[l],
            self.stage[l], self.ph[l], self.tt[l], self.heard[l], self.result[l],
            self.bflag[l].astype(float), self.events[l], np.full(self.n, self.rexec[l]),
        ]).astype(float)


def run_lanes(
    n: int,
    lane_roles: Sequence[Sequence[str]],
    cfg: ProtocolConfig,
    adv: AdversarySpec,
    *,
    round_budget: int | None = None,
    record: bool = False,
    record_lane: int = 0,
    exact: bool = False,
    allow_skip: bool = True,
    start_round: int = 0,
) -> LanesOutput:
    """Run lanes to completion (or to ``start_round + round_budget``)."""
    sim = LaneSim(n, lane_roles, cfg, adv, start_round=start_round, exact=exact, allow_skip=allow_skip)
    trace = None
    kwargs = {}
    if record:
        from .analysis import TraceBuilder

        builder = TraceBuilder(n, lane_roles[record_lane], cfg, adv, start_round)
        builder.add(np.array([start_round]), sim.snapshot(record_lane)[None])
        kwargs = {"record_lane": record_lane, "on_record": builder.add}
    budget = start_round + (round_budget if round_budget is not None else 2**62)
    status = sim.run(budget, **kwargs)
    if record:
        trace = builder.build()
    lanes = [sim.lane_result(l) for l in range(sim.T)]
    out = LanesOutput(lanes, sim.round - start_round, int(sim.ctl[1]), int(sim.ctl[2]), status, trace)
    if status == "budget" and cfg.cap == 0:
        from .mmc import RoundBudgetExceeded

        raise RoundBudgetExceeded(f"no stop within {round_budget} rounds", out)
    return out


def decode_kmax(x: int | float) -> float:
    return INF if int(x) == INF_CODE else int(x)


def estimate_of(k, kmin, kmax) -> EstimateState:
    return EstimateState(int(k), int(kmin), decode_kmax(kmax))
