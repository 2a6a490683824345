import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedkper import metrics
from fedkper.errors import UndefinedPeakError, ValidationError

HAND = [0.5, 0.6, 0.4, 0.7]


def brute_intervals(traj):
    """All (peak, recovery) pairs by definition: peak is a running max that the
    scan reaches, recovery is the first later index at or above it."""
    out = []
    t = 0
    while t < len(traj):
        later = [j for j in range(t + 1, len(traj)) if traj[j] >= traj[t]]
        if not later:
            break
        j = later[0]
        if j - t > 1:
            out.append((t, j))
        t = j
    return out


def test_intervals_examples():
    assert metrics.find_recovery_intervals([0.1, 0.2, 0.3, 0.4]) == []
    ivs = metrics.find_recovery_intervals(HAND)
    assert [(iv.peak, iv.recovery) for iv in ivs] == [(1, 3)]
    assert ivs[0].peak_value == 0.6
    assert metrics.find_recovery_intervals([0.5, 0.6, 0.4]) == []
    assert metrics.find_recovery_intervals([0.3] * 6) == []


@settings(max_examples=100)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=40))
def test_intervals_match_brute_force(traj):
    ivs = metrics.find_recovery_intervals(traj)
    assert [(iv.peak, iv.recovery) for iv in ivs] == brute_intervals(traj)
    for a, b in zip(ivs, ivs[1:]):
        assert a.recovery <= b.peak
    for iv in ivs:
        assert traj[iv.recovery] >= traj[iv.peak]
        assert traj[iv.peak] >= max(traj[: iv.peak + 1])


def test_ipfr_examples():
    iv = metrics.RecoveryInterval(1, 3, 0.6)
    # terms 0, 1/3, 1/6 over a span of 2
    assert metrics.ipfr(HAND, iv) == pytest.approx(0.25, abs=1e-12)
    assert metrics.ipfr([0.8, 0.4, 0.8], metrics.RecoveryInterval(0, 2, 0.8)) == pytest.approx(0.25)
    assert metrics.ipfr([0.3, 0.3, 0.3], metrics.RecoveryInterval(0, 2, 0.3)) == 0.0


def test_ipfr_zero_peak():
    with pytest.raises(UndefinedPeakError):
        metrics.ipfr([0.0, 0.0, 0.0], metrics.RecoveryInterval(0, 2, 0.0))


def test_ipfr_includes_overshooting_endpoint():
    # terms 0, 0.5, 0.5 (recovery at 0.6 overshoots the 0.4 peak)
    rate = metrics.ipfr([0.4, 0.2, 0.6], metrics.RecoveryInterval(0, 2, 0.4))
    assert rate == pytest.approx(0.5)


def test_consistency_examples():
    assert metrics.consistency([0.1, 0.2, 0.9]) == (0.0, 1.0)
    aipfr, cons = metrics.consistency(HAND)
    assert aipfr == pytest.approx(0.25, abs=1e-12)
    assert cons == pytest.approx(0.75, abs=1e-12)
    assert metrics.consistency([0.4] * 5) == (0.0, 1.0)
    with pytest.raises(ValidationError):
        metrics.consistency([])


@settings(max_examples=100)
@given(st.lists(st.floats(0.01, 1), min_size=1, max_size=40))
def test_consistency_bounded_and_ipfr_nonnegative(traj):
    aipfr, cons = metrics.consistency(traj)
    assert cons <= 1.0
    assert aipfr >= 0.0
    assert cons == 1.0 - aipfr


def test_bwt_examples():
    history = {1: {0: 0.5, 1: 0.6}, 2: {2: 0.3}}
    assert metrics.bwt_forgetting(history, {0: 0.5, 1: 0.6, 2: 0.3}, final_round=3) == 0.0
    assert metrics.bwt_forgetting({1: {0: 0.4, 1: 0.8}}, {0: 0.5, 1: 0.5}, 2) == pytest.approx(-0.1)
    history = {2: {7: 0.2}, 5: {7: 0.6}, 10: {7: 0.0}}
    assert metrics.bwt_forgetting(history, {7: 0.9}, final_round=10) == pytest.approx(0.3)


def test_bwt_order_invariance_and_errors():
    history = {1: {3: 0.1, 1: 0.7}, 2: {0: 0.4}}
    final = {0: 0.2, 1: 0.9, 3: 0.5}
    rev = {1: dict(reversed(list(history[1].items()))), 2: history[2]}
    assert metrics.bwt_forgetting(history, final, 3) == metrics.bwt_forgetting(rev, final, 3)
    with pytest.raises(ValidationError):
        metrics.bwt_forgetting({3: {0: 0.1}}, {0: 0.2}, final_round=3)
    with pytest.raises(ValidationError):
        metrics.bwt_forgetting({1: {0: 0.1}}, {}, final_round=3)


def test_balance_and_worst_client():
    b = metrics.balance(0.645, 0.868)
    assert b == pytest.approx(0.7565, abs=1e-12)
    assert abs(b - 0.757) <= 0.0005 + 1e-12
    assert metrics.balance(0.0, 1.0) == 0.5
    assert metrics.balance(0.3, 0.3) == 0.3
    assert metrics.worst_client_accuracy([0.9, 0.3, 0.7]) == 0.3
    assert metrics.worst_client_accuracy({4: 0.6}) == 0.6
    assert metrics.worst_client_accuracy([0.5, 0.5]) == 0.5


def test_summarize_fields():
    g = [0.1, 0.5, 0.6, 0.4, 0.7]
    loc = [0.2, 0.6, 0.5, 0.7, 0.8]
    s = metrics.summarize(g, loc, {1: {0: 0.3}, 2: {1: 0.6}, 4: {0: 0.1}}, {0: 0.5, 1: 0.4}, {0: 0.9, 1: 0.6})
    assert s.global_acc == pytest.approx(np.mean(g[1:]))
    assert s.local_acc == pytest.approx(np.mean(loc[1:]))
    assert s.balance == pytest.approx((s.global_acc + s.local_acc) / 2)
    assert s.consistency == pytest.approx(0.75)
    assert s.bwt == pytest.approx(((0.5 - 0.3) + (0.4 - 0.6)) / 2)
    assert s.worst_client_acc == 0.6
    assert s.consistency == 1 - s.aipfr
