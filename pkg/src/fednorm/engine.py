"""Federated round loop: client sampling, local SGD, convex aggregation, evaluation."""
from __future__ import annotations

import enum
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import Dataset, Partition
from .diagnostics import FactorReport, NormReport, factor_report, norm_report
from .errors import ConfigError, DegenerateNormError
from .model import HeadKind, HeadSpec, LossKind, LossSpec, ModelParams, init_model, loss_and_grads, predict

# stream tags keep sampling and per-client shuffling independent
_SAMPLE_TAG = 0
_CLIENT_TAG = 1


class Algorithm(str, enum.Enum):
    FEDAVG = "fedavg"
    FEDFN = "fedfn"
    FEDFR = "fedfr"
    FEDBABU = "fedbabu"
    SPHEREFED_CE = "spherefed_ce"
    SPHEREFED_MSE = "spherefed_mse"


def algorithm_specs(algorithm: Algorithm | str, mu: float = 0.0, tau: float = 1.0) -> tuple[HeadSpec, LossSpec, bool]:
    """(head, loss, frozen_classifier) used by an algorithm during federated training."""
    alg = Algorithm(algorithm)
    if alg is Algorithm.FEDAVG:
        return HeadSpec(), LossSpec(), False
    if alg is Algorithm.FEDFN:
        return HeadSpec(HeadKind.NORMALIZED_FEATURE), LossSpec(), False
    if alg is Algorithm.FEDFR:
        return HeadSpec(), LossSpec(LossKind.CROSS_ENTROPY_FEATURE_NORM, mu), False
    if alg is Algorithm.FEDBABU:
        return HeadSpec(), LossSpec(), True
    head = HeadSpec(HeadKind.FROZEN_ORTHONORMAL, tau)
    if alg is Algorithm.SPHEREFED_CE:
        return head, LossSpec(), True
    return head, LossSpec(LossKind.MSE_ONE_HOT), True


@dataclass
class FLConfig:
    num_clients: int = 20
    fraction: float = 0.25
    rounds: int = 64
    local_epochs: int = 5
    batch_size: int = 50
    lr: float = 0.01
    algorithm: Algorithm = Algorithm.FEDAVG
    mu: float = 0.0
    tau: float = 1.0
    seed: int = 0
    layer_sizes: tuple[int, ...] = (32, 16)

    def __post_init__(self):
        self.algorithm = Algorithm(self.algorithm)
        self.layer_sizes = tuple(int(v) for v in self.layer_sizes)
        self.validate()

    def validate(self) -> None:
        if not 0 < self.fraction <= 1:
            raise ConfigError("fraction must be positive and at most 1")
        for name in ("num_clients", "rounds", "local_epochs", "batch_size"):
            if getattr(self, name) < 1 and not (name == "rounds" and self.rounds == 0):
                raise ConfigError(f"{name} must be positive")
        if self.lr < 0:
            raise ConfigError("learning rate must be non-negative")
        if self.mu < 0:
            raise ConfigError("mu must be non-negative")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if not self.layer_sizes:
            raise ConfigError("layer_sizes must name at least the feature layer")

    @property
    def clients_per_round(self) -> int:
        return max(1, math.ceil(self.fraction * self.num_clients - 1e-9))

    def specs(self) -> tuple[HeadSpec, LossSpec, bool]:
        return algorithm_specs(self.algorithm, self.mu, self.tau)


@dataclass
class RoundMetrics:
    round: int
    lr: float
    acc: float
    loss: float
    alg: str
    seed: int
    clients: list[int] = field(default_factory=list)
    snapshot: str | None = None

    def to_json(self) -> str:
        return json.dumps({"round": self.round, "lr": self.lr, "acc": self.acc, "loss": self.loss,
                           "alg": self.alg, "seed": self.seed, "snapshot": self.snapshot})


@dataclass
class RunResult:
    model: ModelParams
    initial_model: ModelParams
    metrics: list[RoundMetrics]
    norm_snapshots: dict[int, NormReport] = field(default_factory=dict)
    factor_snapshots: dict[int, FactorReport] = field(default_factory=dict)

    @property
    def final_accuracy(self) -> float | None:
        return self.metrics[-1].acc if self.metrics else None

    def gap_series(self, space: str = "extractor") -> dict[int, float | None]:
        """Per-snapshot local-ID vs global feature-norm gap (``extractor`` or ``head`` space)."""
        attr = {"extractor": "gap", "head": "head_gap"}[space]
        return {r: getattr(rep, attr) for r, rep in sorted(self.norm_snapshots.items())}


def client_seed(seed: int, round: int, client: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, _CLIENT_TAG, round, client])


def sample_clients(num_clients: int, fraction: float, round: int, seed: int) -> list[int]:
    """``ceil(r*N)`` distinct clients, uniform without replacement, sorted."""
    if not 0 < fraction <= 1:
        raise ConfigError("fraction must be positive and at most 1")
    m = max(1, math.ceil(fraction * num_clients - 1e-9))
    if m >= num_clients:
        return list(range(num_clients))
    rng = np.random.default_rng(np.random.SeedSequence([seed, _SAMPLE_TAG, round]))
    return sorted(int(i) for i in rng.choice(num_clients, size=m, replace=False))


def lr_at_round(eta: float, rounds: int, round: int) -> float:
    """Step decay by 0.1 at half and at three quarters of training."""
    if not 0 <= round < rounds:
        raise ValueError(f"round {round} outside [0, {rounds})")
    if round < rounds // 2:
        return eta
    if round < (3 * rounds) // 4:
        return eta * 0.1
    return eta * 0.01


def local_train(model: ModelParams, shard: Dataset, epochs: int, batch_size: int, lr: float, seed,
                loss_spec: LossSpec | None = None, client: int | None = None,
                return_loss: bool = False):
    """Mini-batch SGD on a private copy of ``model``.

    Each epoch reshuffles with the seeded generator; the last short batch is
    kept. A frozen classifier is never touched. With ``return_loss`` the mean
    batch loss is returned alongside the model.
    """
    if len(shard) == 0:
        raise ConfigError(f"client {client}: empty local dataset")
    loss_spec = loss_spec or LossSpec()
    loss_spec.check_head(model.head)
    rng = np.random.default_rng(seed)
    out = model.copy()
    arrays = out.arrays()
    losses = []
    n = len(shard)
    for epoch in range(epochs):
        order = rng.permutation(n)
        for b, start in enumerate(range(0, n, batch_size)):
            idx = order[start:start + batch_size]
            try:
                value, grads = loss_and_grads(loss_spec, out, shard.x[idx], shard.y[idx])
            except DegenerateNormError as exc:
                raise DegenerateNormError(f"client {client}, epoch {epoch}, batch {b}: {exc}") from exc
            losses.append(value)
            for arr, g in zip(arrays, grads):
                if g is not None:
                    arr -= lr * g
    return (out, float(np.mean(losses))) if return_loss else out


def aggregate(models: Sequence[ModelParams], weights: Sequence[float]) -> ModelParams:
    """Parameter-wise convex combination, accumulated in list order."""
    if not models or len(models) != len(weights):
        raise ConfigError("need one weight per model")
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
        raise ConfigError("aggregation weights must be non-negative and sum to 1")
    first = models[0]
    for m in models[1:]:
        if not first.same_architecture(m):
            raise ConfigError("cannot aggregate models with different architectures")
    out = first.copy()
    targets = out.arrays()
    n_arrays = len(targets) - 1 if first.frozen_classifier else len(targets)
    for i in range(n_arrays):
        acc = w[0] * models[0].arrays()[i]
        for wk, m in zip(w[1:], models[1:]):
            acc = acc + wk * m.arrays()[i]
        targets[i][...] = acc
    return out


def evaluate(model: ModelParams, dataset: Dataset) -> float:
    if len(dataset) == 0:
        raise ConfigError("cannot evaluate on an empty dataset")
    return float(np.mean(predict(model, dataset.x) == dataset.y))


def default_snapshot_rounds(rounds: int, every: int | None = None) -> list[int]:
    every = every or max(1, rounds // 16)
    picks = set(range(every - 1, rounds, every))
    if rounds:
        picks.add(rounds - 1)
    return sorted(picks)


def run_federated(config: FLConfig, train: Dataset, test: Dataset, partition: Partition,
                  initial_model: ModelParams | None = None,
                  snapshot_rounds: Sequence[int] | None = None,
                  factor_snapshots: bool = False,
                  max_workers: int = 1,
                  on_round: Callable[[RoundMetrics, RunResult], None] | None = None) -> RunResult:
    """Run ``config.rounds`` rounds of sample, broadcast, local training, aggregation.

    Aggregation weights are the selected clients' data shares. Norm snapshots
    compare that round's local models against the freshly aggregated model.
    Results are identical for any ``max_workers`` since the reduction order is
    fixed.
    """
    if partition.num_clients != config.num_clients:
        raise ConfigError(f"partition has {partition.num_clients} clients, config says {config.num_clients}")
    head, loss_spec, frozen = config.specs()
    if initial_model is None:
        initial_model = init_model(train.dim, config.layer_sizes, train.num_classes, head,
                                   config.seed, frozen)
    loss_spec.check_head(initial_model.head)
    snaps = set(default_snapshot_rounds(config.rounds) if snapshot_rounds is None else snapshot_rounds)
    shards = [partition.client_data(train, n) for n in range(config.num_clients)]
    sizes = np.array([len(s) for s in shards], dtype=np.float64)

    model = initial_model.copy()
    result = RunResult(model, initial_model.copy(), [])
    pool = ThreadPoolExecutor(max_workers) if max_workers > 1 else None
    try:
        for r in range(config.rounds):
            lr = lr_at_round(config.lr, config.rounds, r)
            selected = [n for n in sample_clients(config.num_clients, config.fraction, r, config.seed)
                        if sizes[n] > 0]
            if not selected:
                raise ConfigError(f"round {r}: every sampled client is empty")

            def train_one(n, start=model, lr=lr, r=r):
                return local_train(start, shards[n], config.local_epochs, config.batch_size, lr,
                                   client_seed(config.seed, r, n), loss_spec, client=n, return_loss=True)

            outs = list(pool.map(train_one, selected)) if pool else [train_one(n) for n in selected]
            weights = sizes[selected] / sizes[selected].sum()
            model = aggregate([m for m, _ in outs], weights)
            metrics = RoundMetrics(r, lr, evaluate(model, test), float(np.mean([l for _, l in outs])),
                                   config.algorithm.value, config.seed, selected)
            if r in snaps:
                locals_ = {n: m for n, (m, _) in zip(selected, outs)}
                result.norm_snapshots[r] = norm_report(locals_, model, partition, train, test, round=r)
                if factor_snapshots:
                    result.factor_snapshots[r] = factor_report(model, test, round=r)
            result.metrics.append(metrics)
            result.model = model
            if on_round is not None:
                on_round(metrics, result)
    finally:
        if pool is not None:
            pool.shutdown()
    return result


def train_centralized(config: FLConfig, train: Dataset, initial_model: ModelParams | None = None) -> ModelParams:
    """Single-holder reference: the same per-round schedule and RNG streams as one client."""
    head, loss_spec, frozen = config.specs()
    model = initial_model.copy() if initial_model is not None else init_model(
        train.dim, config.layer_sizes, train.num_classes, head, config.seed, frozen)
    for r in range(config.rounds):
        model = local_train(model, train, config.local_epochs, config.batch_size,
                            lr_at_round(config.lr, config.rounds, r), client_seed(config.seed, r, 0), loss_spec)
    return model


def metrics_jsonl(metrics: Sequence[RoundMetrics]) -> str:
    return "".join(m.to_json() + "\n" for m in metrics)
