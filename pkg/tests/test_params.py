import math

import mpmath
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adn_count.params import (
    INF,
    PAPER,
    EstimateState,
    Mode,
    SearchInconsistency,
    check_conditions,
    derive_epoch_params,
    initial_estimate,
    max_search_rounds,
    search_sequence,
    update_estimate,
    worst_case_schedule,
)

mpmath.mp.dps = 50


def oracle(k, ell, eps):
    """The epoch constants recomputed at 50 digits, independently of the package."""
    k_, eps_ = mpmath.mpf(k), mpmath.mpf(eps)
    d = int(mpmath.ceil(k_ ** (1 + eps_)))
    ln = mpmath.log
    logk = lambda x: ln(x) / ln(k_)
    gamma = logk(d)
    alpha = 1 + gamma + logk(3)
    delta = 2 * gamma + mpmath.mpf("0.05")
    beta = logk(d * (2 * k_**delta + 1))
    p = mpmath.ceil(2 * ln(k_) / ell * max(gamma / (1 / k_ + k_**-alpha), delta / (mpmath.mpf(1) / d + k_**-beta)))
    third = 2 + eps_ - ln(k_**eps_ - 1) / ln(k_)
    r = mpmath.ceil(2 * d * k_**2 * ln(k_) * max(alpha, beta * k_ ** (2 * eps_), third))
    tau = ell * (1 - ell / k_ ** (1 + eps_))
    return dict(d=d, p=int(p), r=int(r), tau=tau, alpha=alpha, beta=beta, gamma=gamma, delta=delta)


def test_small_epoch_matches_oracle_values():
    ep = derive_epoch_params(2, 1, 1.0)
    assert (ep.d, ep.p, ep.r) == (4, 22, 630)
    assert ep.tau == 0.75
    assert ep.gamma == pytest.approx(2.0, abs=1e-15)
    assert ep.delta == pytest.approx(4.05, abs=1e-14)
    assert ep.beta == pytest.approx(7.092904, abs=1e-6)
    assert ep.alpha == pytest.approx(4.584963, abs=1e-6)


@pytest.mark.parametrize("ell", [1, 2, 3])
@pytest.mark.parametrize("eps", [0.5, 1.0, 0.25])
def test_epoch_constants_match_high_precision_oracle(ell, eps):
    for k in range(ell + 1, 65):
        ep = derive_epoch_params(k, ell, eps)
        o = oracle(k, ell, eps)
        assert (ep.d, ep.p, ep.r) == (o["d"], o["p"], o["r"]), k
        for name in ("tau", "alpha", "beta", "gamma", "delta"):
            assert getattr(ep, name) == pytest.approx(float(o[name]), rel=1e-12), (k, name)


def test_scaled_mode_shrinks_only_phase_counts():
    paper = derive_epoch_params(2, 1, 1.0)
    ep = derive_epoch_params(2, 1, 1.0, Mode.scaled(0.01))
    assert (ep.p, ep.r) == (1, 6)
    assert (ep.d, ep.tau, ep.beta, ep.gamma) == (paper.d, paper.tau, paper.beta, paper.gamma)
    assert not ep.mode.is_paper
    assert ep.mode.to_json()["guarantee"] == "none"


def test_mode_json_round_trip():
    for m in (PAPER, Mode.scaled(0.2), Mode.scaled(0.5, 0.25)):
        assert Mode.from_json(m.to_json()) == m


@pytest.mark.parametrize("k, ell, eps", [(1, 1, 0.5), (3, 3, 0.5), (2, 0, 0.5), (4, 1, 0.0), (4, 1, -1.0)])
def test_rejects_bad_arguments(k, ell, eps):
    with pytest.raises(ValueError):
        derive_epoch_params(k, ell, eps)


@settings(max_examples=200, deadline=None)
@given(ell=st.integers(1, 6), extra=st.integers(1, 250), eps=st.sampled_from([0.1, 0.25, 0.5, 0.75, 1.0, 1.5]))
def test_conditions_hold(ell, extra, eps):
    ep = derive_epoch_params(ell + extra, ell, eps)
    assert all(check_conditions(ep).values()), check_conditions(ep)
    assert ep.p >= 1 and ep.r >= 1


@pytest.mark.parametrize("ell, eps", [(1, 0.5), (2, 0.5), (1, 1.0), (3, 0.25)])
def test_constants_non_decreasing_in_k(ell, eps):
    prev = derive_epoch_params(ell + 1, ell, eps)
    for k in range(ell + 2, 257):
        ep = derive_epoch_params(k, ell, eps)
        assert ep.d >= prev.d and ep.p >= prev.p and ep.r >= prev.r, k
        prev = ep


def test_update_estimate_examples():
    assert update_estimate("low", EstimateState(4, 3, INF)) == EstimateState(8, 5, INF)
    assert update_estimate("high", EstimateState(8, 5, INF)) == EstimateState(6, 5, 7)
    assert update_estimate("low", EstimateState(6, 5, 7)) == EstimateState(7, 7, 7)


def test_update_estimate_detects_empty_range():
    with pytest.raises(SearchInconsistency):
        update_estimate("high", EstimateState(3, 3, INF))
    with pytest.raises(SearchInconsistency):
        update_estimate("low", EstimateState(7, 7, 7))
    with pytest.raises(ValueError):
        update_estimate("done", EstimateState(3, 3, INF))


def test_estimate_json_uses_inf_literal():
    s = initial_estimate(2)
    assert s == EstimateState(3, 3, INF)
    assert s.to_json()["max"] == "inf"
    assert EstimateState.from_json(s.to_json()) == s
    t = EstimateState(6, 5, 7)
    assert EstimateState.from_json(t.to_json()) == t


@given(n=st.integers(2, 400), data=st.data())
def test_search_reaches_n(n, data):
    ell = data.draw(st.integers(1, n - 1))
    seq = search_sequence(n, ell)
    assert seq[0] == ell + 1 and seq[-1] == n
    assert len(seq) == len(set(seq))


def test_schedule_examples():
    s = worst_case_schedule(8, 1, 0.5)
    assert (s.E, s.B) == ((2, 4, 8), (6,))
    s = worst_case_schedule(2, 1, 0.5)
    assert (s.E, s.B) == ((2,), ())
    s = worst_case_schedule(4, 1, 1.0)
    expect = sum(derive_epoch_params(k, 1, 1.0).p * derive_epoch_params(k, 1, 1.0).r + derive_epoch_params(k, 1, 1.0).d for k in (2, 4))
    assert s.total_bound == expect
    assert s.per_epoch_rounds == {2: 22 * 630 + 4, 4: s.total_bound - (22 * 630 + 4)}


@given(n=st.integers(2, 600), data=st.data())
def test_schedule_shape(n, data):
    ell = data.draw(st.integers(1, n - 1))
    s = worst_case_schedule(n, ell, 0.5)
    top = max(s.E)
    assert top >= n and top < 2 * max(n, 2 * (ell + 1))
    assert all(ell < k <= top for k in s.E + s.B)
    assert all(top // 2 <= k < top for k in s.B)
    assert s.E == tuple(sorted(s.E)) and s.B == tuple(sorted(s.B, reverse=True))


def test_max_search_rounds_brute_force():
    cost = lambda k: k * k + 1

    def paths(k, lo, hi, K):
        if k > K:
            return [0]
        out = [cost(k)]
        for status in ("low", "high"):
            try:
                s = update_estimate(status, EstimateState(k, lo, hi))
            except SearchInconsistency:
                continue
            out += [cost(k) + t for t in paths(s.k, s.min, s.max, K)]
        return out

    for K in (2, 4, 8, 16):
        assert max_search_rounds(K, 1, cost) == max(paths(2, 2, INF, K))
    assert max_search_rounds(8, 1, lambda k: 1) == 5  # 2, 4, 8, then 6, 7 after a high verdict
    assert math.isfinite(max_search_rounds(64, 1, cost))
