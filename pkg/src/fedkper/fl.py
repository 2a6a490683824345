"""Round orchestration: sampling, local training, weighting and aggregation."""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import nn
from .data import ClientDataset, Dataset
from .errors import ConfigError, DimensionError, NumericError, ValidationError
from .metrics import ForgettingSummary, summarize

log = logging.getLogger(__name__)

EPS = 1e-12

# independent RNG streams, keyed into SeedSequence alongside the experiment seed
SAMPLE_STREAM = 0x5A4D
TRAIN_STREAM = 0x7A11
INIT_STREAM = 0x1417

STRATEGY_KINDS = ("fedavg", "fedprox", "fedkper", "fedkper-kd", "fedkper-agg")


@dataclass(frozen=True)
class Strategy:
    """Local objective plus aggregation rule.

    ``fedkper-kd`` and ``fedkper-agg`` isolate the two halves of FedKPer:
    adaptive distillation with size-weighted averaging, and plain CE with
    reliability x diversity weighting.
    """

    kind: str = "fedavg"
    mu: float = 0.01

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ConfigError(f"unknown strategy {self.kind!r}", key="strategy")
        if self.mu < 0 or not math.isfinite(self.mu):
            raise ConfigError("FedProx mu must be >= 0", key="mu")

    @classmethod
    def parse(cls, text: str, default_mu: float = 0.01) -> Strategy:
        """Parse ``fedavg``, ``fedkper``, ``fedprox`` or ``fedprox:0.1``."""
        kind, _, arg = text.strip().lower().partition(":")
        if arg and kind != "fedprox":
            raise ConfigError(f"strategy {kind!r} takes no argument", key="strategy")
        try:
            mu = float(arg) if arg else default_mu
        except ValueError:
            raise ConfigError(f"bad FedProx mu {arg!r}", key="mu") from None
        return cls(kind, mu)

    @property
    def label(self) -> str:
        return f"fedprox:{self.mu:g}" if self.kind == "fedprox" else self.kind

    @property
    def distill(self) -> bool:
        return self.kind in ("fedkper", "fedkper-kd")

    @property
    def proximal_mu(self) -> float:
        return self.mu if self.kind == "fedprox" else 0.0

    @property
    def score_weighting(self) -> bool:
        return self.kind in ("fedkper", "fedkper-agg")


@dataclass(frozen=True, eq=False)
class ClientUpdate:
    """Everything a client sends to the server after local training.

    In strict mode only ``params``, ``size`` and the pre-combined ``score``
    are filled in; accuracy and histogram stay on the device.
    """

    client_id: int
    params: nn.ModelParams
    size: int
    train_accuracy: float | None = None
    histogram: np.ndarray | None = None
    score: float | None = None

    def __post_init__(self):
        if self.histogram is not None:
            if int(np.sum(self.histogram)) != self.size:
                raise ValidationError(f"client {self.client_id}: histogram does not sum to n_k")


@dataclass(frozen=True, eq=False)
class AggregationWeights:
    client_ids: tuple[int, ...]
    weights: np.ndarray
    sizes: np.ndarray
    accuracy: np.ndarray
    diversity: np.ndarray
    scores: np.ndarray

    def as_dict(self) -> dict[int, float]:
        return dict(zip(self.client_ids, self.weights.tolist()))


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 5
    lr: float = 0.01
    batch_size: int = 32
    max_grad_norm: float = nn.DEFAULT_MAX_GRAD_NORM
    lambda_cap: float = nn.DEFAULT_LAMBDA_CAP
    sample_fraction: float = 0.1
    strict_transmission: bool = False
    workers: int = 1


@dataclass
class RoundRecord:
    round: int
    sampled: tuple[int, ...]
    weights: AggregationWeights
    global_test_accuracy: float
    local_test_accuracy: dict[int, float]
    global_on_client: dict[int, float]
    duration: float
    lambdas: dict[int, list[float]] = field(default_factory=dict)

    @property
    def mean_local_accuracy(self) -> float:
        return math.fsum(self.local_test_accuracy.values()) / len(self.local_test_accuracy)

    @property
    def sampled_global_on_client(self) -> dict[int, float]:
        return {k: self.global_on_client[k] for k in self.sampled}


def _stream(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


def sample_clients(total: int, fraction: float, round_index: int, seed: int) -> tuple[int, ...]:
    """``max(1, round(fraction * total))`` distinct clients, sorted ascending."""
    if not 0 < fraction <= 1:
        raise ConfigError("sample fraction must lie in (0, 1]", key="sample_fraction")
    if total < 1:
        raise ConfigError("need at least one client", key="clients")
    m = max(1, int(math.floor(fraction * total + 0.5)))
    m = min(m, total)
    ids = np.arange(total)
    chosen = _stream(seed, SAMPLE_STREAM, round_index).permutation(ids)[:m]
    return tuple(sorted(int(k) for k in chosen))


def client_rng(seed: int, round_index: int, client_id: int) -> np.random.Generator:
    return _stream(seed, TRAIN_STREAM, round_index, client_id)


def diversity_score(histogram, class_count: int) -> float:
    """Normalized label entropy of a histogram, in [0, 1]."""
    m = np.asarray(histogram, dtype=np.float64).reshape(-1)
    if class_count < 2:
        raise ValidationError("diversity needs at least 2 classes")
    if m.size != class_count:
        raise DimensionError(f"histogram has {m.size} bins, expected {class_count}")
    if np.any(m < 0):
        raise ValidationError("histogram has negative counts")
    total = m.sum()
    if total == 0:
        raise ValidationError("histogram is all zero")
    pi = m / (total + EPS)
    entropy = -float(np.sum(pi * np.log(pi + EPS)))
    # a single-class histogram gives entropy of order -1e-12 through the epsilons
    return max(entropy, 0.0) / (math.log(class_count) + EPS)


def aggregation_score(train_accuracy: float, diversity: float) -> float:
    return train_accuracy * (EPS + diversity)


def local_train(
    strategy: Strategy,
    global_params: nn.ModelParams,
    client: ClientDataset,
    *,
    epochs: int,
    lr: float,
    batch_size: int,
    rng: np.random.Generator,
    max_grad_norm: float = nn.DEFAULT_MAX_GRAD_NORM,
    lambda_cap: float = nn.DEFAULT_LAMBDA_CAP,
    strict: bool = False,
    round_index: int | None = None,
    lambda_log: list | None = None,
) -> ClientUpdate:
    """Train a copy of the global model on one client's train split."""
    train = client.train
    if len(train) == 0:
        raise ValidationError(f"client {client.client_id} has no training data")
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1", key="batch_size")
    params = global_params
    x, y = train.features, train.labels
    for _ in range(epochs):
        order = rng.permutation(len(train))
        for start in range(0, len(train), batch_size):
            idx = order[start:start + batch_size]
            out = nn.local_objective(
                params,
                global_params,
                x[idx],
                y[idx],
                distill=strategy.distill,
                mu=strategy.proximal_mu,
                lambda_cap=lambda_cap,
            )
            if not math.isfinite(out.total):
                raise NumericError(
                    f"non-finite loss on client {client.client_id} in round {round_index}"
                )
            if lambda_log is not None and strategy.distill:
                lambda_log.append(out.lam)
            try:
                params = nn.sgd_step(params, out.grad, lr, max_grad_norm)
            except NumericError as exc:
                raise NumericError(f"client {client.client_id}, round {round_index}: {exc}") from None
    acc = nn.accuracy(params, x, y)
    hist = client.histogram
    if strict:
        d = diversity_score(hist, train.class_count)
        return ClientUpdate(client.client_id, params, client.size, score=aggregation_score(acc, d))
    return ClientUpdate(client.client_id, params, client.size, train_accuracy=acc, histogram=hist.copy())


def _ordered(updates: Sequence[ClientUpdate]) -> list[ClientUpdate]:
    if not updates:
        raise ValidationError("need at least one client update")
    ordered = sorted(updates, key=lambda u: u.client_id)
    ids = [u.client_id for u in ordered]
    if len(set(ids)) != len(ids):
        raise ValidationError("duplicate client ids in updates")
    return ordered


def _diagnostics(ordered, class_count):
    acc = np.array([np.nan if u.train_accuracy is None else u.train_accuracy for u in ordered])
    div = np.array(
        [np.nan if u.histogram is None else diversity_score(u.histogram, class_count) for u in ordered]
    )
    scores = np.array(
        [u.score if u.score is not None else aggregation_score(a, d) for u, a, d in zip(ordered, acc, div)]
    )
    return acc, div, scores


def fedavg_weights(updates: Sequence[ClientUpdate], class_count: int | None = None) -> AggregationWeights:
    """Sample-size weights n_k / sum_j n_j."""
    ordered = _ordered(updates)
    sizes = np.array([u.size for u in ordered], dtype=np.float64)
    if class_count is not None:
        acc, div, scores = _diagnostics(ordered, class_count)
    else:
        acc = div = scores = np.full(len(ordered), np.nan)
    return AggregationWeights(
        tuple(u.client_id for u in ordered), sizes / sizes.sum(), sizes.astype(np.int64), acc, div, scores
    )


def fedkper_weights(updates: Sequence[ClientUpdate], class_count: int) -> AggregationWeights:
    """Reliability x diversity weights, normalized over the sampled clients.

    Falls back to uniform weights when every score is zero.
    """
    ordered = _ordered(updates)
    acc, div, scores = _diagnostics(ordered, class_count)
    if np.any(np.isnan(scores)):
        raise ValidationError("FedKPer weighting needs accuracy and histogram, or a score")
    if np.any(scores < 0):
        raise ValidationError("aggregation scores must be non-negative")
    total = scores.sum()
    if total > 0:
        weights = scores / total
    else:
        log.warning("all aggregation scores are zero; using uniform weights")
        weights = np.full(len(ordered), 1.0 / len(ordered))
    sizes = np.array([u.size for u in ordered], dtype=np.int64)
    return AggregationWeights(tuple(u.client_id for u in ordered), weights, sizes, acc, div, scores)


def aggregate(updates: Sequence[ClientUpdate], weights: AggregationWeights) -> nn.ModelParams:
    """Convex combination of client models, reduced in ascending client order.

    Computed as ``w_ref + sum_k p_k (w_k - w_ref)`` with the lowest-id client
    as reference, which is the same combination but returns identical
    inputs (or a one-hot weighting on the reference) bit-exactly.
    """
    ordered = _ordered(updates)
    if tuple(u.client_id for u in ordered) != weights.client_ids:
        raise ValidationError("weights and updates cover different clients")
    ref = ordered[0].params
    for u in ordered[1:]:
        if u.params.manifest != ref.manifest:
            raise DimensionError(f"client {u.client_id} has a different parameter manifest")
    w = weights.weights
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
        raise ValidationError("aggregation weights must be a probability vector")
    acc = np.zeros_like(ref.values)
    for p, u in zip(w, ordered):
        acc += p * (u.params.values - ref.values)
    # untouched coordinates keep the reference bits (including signed zeros)
    return ref.with_values(np.where(acc == 0.0, ref.values, ref.values + acc))


@dataclass
class FederatedState:
    """Mutable orchestrator state; only :func:`run_round` writes to it."""

    global_params: nn.ModelParams
    clients: list[ClientDataset]
    global_test: Dataset
    training: TrainingConfig
    seed: int
    personal: dict[int, nn.ModelParams] = field(default_factory=dict)
    executor: ThreadPoolExecutor | None = None

    @property
    def class_count(self) -> int:
        return self.global_test.class_count


def evaluate(state: FederatedState) -> tuple[float, dict[int, float], dict[int, float]]:
    """Global test accuracy, per-client local accuracy, per-client global accuracy.

    A client's local accuracy is that of its most recently trained model on
    its local test split; clients that have never trained use the global model.
    """
    g = state.global_params
    global_acc = nn.accuracy(g, state.global_test.features, state.global_test.labels)
    on_client = {c.client_id: nn.accuracy(g, c.test.features, c.test.labels) for c in state.clients}
    local = {}
    for c in state.clients:
        if c.client_id in state.personal:
            local[c.client_id] = nn.accuracy(state.personal[c.client_id], c.test.features, c.test.labels)
        else:
            local[c.client_id] = on_client[c.client_id]
    return global_acc, local, on_client


def run_round(state: FederatedState, strategy: Strategy, round_index: int) -> RoundRecord:
    started = time.perf_counter()
    cfg = state.training
    sampled = sample_clients(len(state.clients), cfg.sample_fraction, round_index, state.seed)
    broadcast = state.global_params
    by_id = {c.client_id: c for c in state.clients}
    lambdas = {k: [] for k in sampled}

    def train_one(k: int) -> ClientUpdate:
        return local_train(
            strategy,
            broadcast,
            by_id[k],
            epochs=cfg.epochs,
            lr=cfg.lr,
            batch_size=cfg.batch_size,
            rng=client_rng(state.seed, round_index, k),
            max_grad_norm=cfg.max_grad_norm,
            lambda_cap=cfg.lambda_cap,
            strict=cfg.strict_transmission,
            round_index=round_index,
            lambda_log=lambdas[k],
        )

    if state.executor is not None and len(sampled) > 1:
        updates = list(state.executor.map(train_one, sampled))
    else:
        updates = [train_one(k) for k in sampled]

    if strategy.score_weighting:
        weights = fedkper_weights(updates, state.class_count)
    else:
        weights = fedavg_weights(updates, None if cfg.strict_transmission else state.class_count)
    state.global_params = aggregate(updates, weights)
    for u in updates:
        state.personal[u.client_id] = u.params
    global_acc, local, on_client = evaluate(state)
    return RoundRecord(
        round=round_index,
        sampled=sampled,
        weights=weights,
        global_test_accuracy=global_acc,
        local_test_accuracy=local,
        global_on_client=on_client,
        duration=time.perf_counter() - started,
        lambdas=lambdas if strategy.distill else {},
    )


@dataclass
class ExperimentLog:
    strategy: Strategy
    seed: int
    initial_global_accuracy: float
    initial_local_accuracy: dict[int, float]
    initial_global_on_client: dict[int, float]
    records: list[RoundRecord]
    summary: ForgettingSummary | None = None

    @property
    def global_trajectory(self) -> list[float]:
        return [self.initial_global_accuracy] + [r.global_test_accuracy for r in self.records]

    @property
    def local_trajectory(self) -> list[float]:
        init = math.fsum(self.initial_local_accuracy.values()) / len(self.initial_local_accuracy)
        return [init] + [r.mean_local_accuracy for r in self.records]

    def sampled_history(self) -> dict[int, dict[int, float]]:
        return {r.round: r.sampled_global_on_client for r in self.records}


def run_experiment(
    clients: list[ClientDataset],
    global_test: Dataset,
    strategy: Strategy,
    *,
    rounds: int,
    seed: int,
    training: TrainingConfig = TrainingConfig(),
    hidden: Sequence[int] = nn.DEFAULT_HIDDEN,
    on_start: Callable[[ExperimentLog], None] | None = None,
    on_round: Callable[[RoundRecord], None] | None = None,
) -> ExperimentLog:
    """Run ``rounds`` federated rounds and summarize the trajectories.

    ``on_round`` sees every record as soon as it exists, so callers can
    stream logs to disk and keep whatever finished if a later round fails.
    """
    if rounds < 1:
        raise ConfigError("rounds must be >= 1", key="rounds")
    sizes = [global_test.dim, *hidden, global_test.class_count]
    state = FederatedState(
        global_params=nn.init_mlp(sizes, seed, owner=INIT_STREAM),
        clients=list(clients),
        global_test=global_test,
        training=training,
        seed=seed,
    )
    g0, local0, on_client0 = evaluate(state)
    result = ExperimentLog(strategy, seed, g0, local0, on_client0, [])
    if on_start is not None:
        on_start(result)
    executor = ThreadPoolExecutor(training.workers) if training.workers > 1 else None
    state.executor = executor
    try:
        for t in range(1, rounds + 1):
            record = run_round(state, strategy, t)
            result.records.append(record)
            if on_round is not None:
                on_round(record)
    finally:
        if executor is not None:
            executor.shutdown()
    last = result.records[-1]
    result.summary = summarize(
        result.global_trajectory,
        result.local_trajectory,
        result.sampled_history(),
        last.global_on_client,
        last.local_test_accuracy,
    )
    return result
