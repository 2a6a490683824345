"""Forgetting-oriented evaluation: recovery intervals, consistency, BwT, balance."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import UndefinedPeakError, ValidationError


@dataclass(frozen=True)
class RecoveryInterval:
    peak: int
    recovery: int
    peak_value: float

    @property
    def length(self) -> int:
        return self.recovery - self.peak


def _trajectory(traj) -> np.ndarray:
    a = np.asarray(traj, dtype=np.float64).reshape(-1)
    if a.size == 0:
        raise ValidationError("accuracy trajectory is empty")
    if not np.all(np.isfinite(a)):
        raise ValidationError("accuracy trajectory contains non-finite values")
    return a


def find_recovery_intervals(traj) -> list[RecoveryInterval]:
    """Scan for peak-to-recovery spans with at least one round in between.

    A round that reaches the current peak closes the open span and becomes
    the new peak. Immediate recoveries and a span still open at the end of
    the trajectory are dropped.
    """
    a = _trajectory(traj)
    intervals = []
    peak = 0
    for t in range(1, a.size):
        if a[t] >= a[peak]:
            if t - peak > 1:
                intervals.append(RecoveryInterval(peak, t, float(a[peak])))
            peak = t
    return intervals


def ipfr(traj, interval: RecoveryInterval) -> float:
    """Inter-peak forgetting rate; both endpoints included in the sum."""
    a = _trajectory(traj)
    peak_value = a[interval.peak]
    if peak_value == 0:
        raise UndefinedPeakError(f"peak at round {interval.peak} is zero")
    if interval.recovery <= interval.peak:
        raise ValidationError("recovery index must follow the peak index")
    window = a[interval.peak:interval.recovery + 1]
    return float(np.abs(peak_value - window).sum() / peak_value / interval.length)


def consistency(traj) -> tuple[float, float]:
    """Return ``(aipfr, 1 - aipfr)``; a trajectory without dips scores (0, 1)."""
    intervals = find_recovery_intervals(traj)
    if not intervals:
        return 0.0, 1.0
    rates = [ipfr(traj, iv) for iv in intervals]
    aipfr = math.fsum(rates) / len(rates)
    return aipfr, 1.0 - aipfr


def bwt_forgetting(
    history: Mapping[int, Mapping[int, float]],
    final: Mapping[int, float],
    final_round: int | None = None,
) -> float:
    """Mean change in global-model accuracy on previously sampled clients.

    ``history`` maps round -> {client: global-model accuracy on that client}
    for the clients sampled in that round. Rounds at or after
    ``final_round`` (default: the last round in ``history``) are ignored;
    each client contributes ``final[k]`` minus its most recent sampled value.
    """
    if final_round is None:
        if not history:
            raise ValidationError("no sampling history")
        final_round = max(history)
    latest: dict[int, float] = {}
    for t in sorted(history):
        if t >= final_round:
            continue
        for k, acc in history[t].items():
            latest[k] = acc
    if not latest:
        raise ValidationError("no client was sampled before the final round")
    missing = sorted(set(latest) - set(final))
    if missing:
        raise ValidationError(f"final accuracies missing for clients {missing}")
    deltas = [final[k] - latest[k] for k in sorted(latest)]
    return math.fsum(deltas) / len(deltas)


def balance(global_acc_mean: float, local_acc_mean: float) -> float:
    return (global_acc_mean + local_acc_mean) / 2.0


def worst_client_accuracy(local_accuracies) -> float:
    values = list(local_accuracies.values()) if isinstance(local_accuracies, Mapping) else list(local_accuracies)
    if not values:
        raise ValidationError("need at least one client accuracy")
    return float(min(values))


@dataclass(frozen=True)
class ForgettingSummary:
    global_acc: float
    final_global_acc: float
    bwt: float | None
    aipfr: float
    consistency: float
    interval_count: int
    local_acc: float
    final_local_acc: float
    worst_client_acc: float
    local_aipfr: float
    local_consistency: float
    local_interval_count: int
    balance: float

    def to_dict(self) -> dict:
        return asdict(self)


def summarize(
    global_traj: Sequence[float],
    local_traj: Sequence[float],
    sampled_history: Mapping[int, Mapping[int, float]],
    final_global_on_clients: Mapping[int, float],
    final_local: Mapping[int, float],
) -> ForgettingSummary:
    """Table-style summary of one run.

    Both trajectories start at round 0 (the initial model). Average
    accuracies are taken over rounds 1..T; consistency uses the full
    trajectory, including round 0.
    """
    g = _trajectory(global_traj)
    loc = _trajectory(local_traj)
    if g.size != loc.size:
        raise ValidationError("global and local trajectories differ in length")
    rounds = g[1:] if g.size > 1 else g
    local_rounds = loc[1:] if loc.size > 1 else loc
    g_mean = math.fsum(rounds) / rounds.size
    l_mean = math.fsum(local_rounds) / local_rounds.size
    aipfr, cons = consistency(g)
    laipfr, lcons = consistency(loc)
    final_round = g.size - 1
    try:
        bwt = bwt_forgetting(sampled_history, final_global_on_clients, final_round)
    except ValidationError:
        # a single-round run has nobody sampled before round T
        bwt = None
    return ForgettingSummary(
        global_acc=g_mean,
        final_global_acc=float(g[-1]),
        bwt=bwt,
        aipfr=aipfr,
        consistency=cons,
        interval_count=len(find_recovery_intervals(g)),
        local_acc=l_mean,
        final_local_acc=float(loc[-1]),
        worst_client_acc=worst_client_accuracy(final_local),
        local_aipfr=laipfr,
        local_consistency=lcons,
        local_interval_count=len(find_recovery_intervals(loc)),
        balance=balance(g_mean, l_mean),
    )
