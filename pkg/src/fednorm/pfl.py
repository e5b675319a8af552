"""Two-step personalization: fine-tune the global model on each client's shard."""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .data import Dataset, Partition, client_classes
from .engine import client_seed, evaluate, local_train
from .errors import EmptyTestsetError
from .model import LossSpec, ModelParams

DEFAULT_EPOCHS = 5
_PFL_ROUND = 2**31 - 1  # RNG stream tag outside any realistic round index


@dataclass
class PersonalResult:
    accuracies: list[float]
    clients: list[int]
    lr: float
    epochs: int
    excluded: list[int] = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std(self) -> float:
        return float(np.std(self.accuracies))

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(mean=self.mean, std=self.std)
        return d


@dataclass
class PFLReport:
    results: list[PersonalResult]
    global_personal: PersonalResult

    @property
    def best(self) -> PersonalResult:
        # first grid entry wins ties
        return max(self.results, key=lambda r: r.mean)

    def to_dict(self) -> dict:
        return {"results": [r.to_dict() for r in self.results],
                "global_personal": self.global_personal.to_dict(),
                "best_lr": self.best.lr}


def build_personal_testset(test: Dataset, partition: Partition, train: Dataset, n: int) -> Dataset:
    """Test examples whose labels the client holds in its training shard."""
    classes = client_classes(partition, train, n)
    if not classes:
        raise EmptyTestsetError(f"client {n} holds no classes")
    return test.subset(np.flatnonzero(np.isin(test.y, sorted(classes))))


def fine_tune(global_model: ModelParams, client_train: Dataset, epochs: int = DEFAULT_EPOCHS,
              lr: float = 0.01, seed=0, unfreeze: bool = True, batch_size: int = 50,
              loss_spec: LossSpec | None = None) -> ModelParams:
    """Local SGD from a copy of the global model; ``unfreeze`` also trains a frozen classifier."""
    if epochs < 1:
        raise ValueError("fine-tuning needs at least one epoch")
    start = global_model
    if unfreeze and global_model.frozen_classifier:
        start = replace(global_model.copy(), frozen_classifier=False)
    return local_train(start, client_train, epochs, batch_size, lr, seed, loss_spec)


def pfl_evaluate(global_model: ModelParams, partition: Partition, train: Dataset, test: Dataset,
                 epochs: int = DEFAULT_EPOCHS, lr_grid: Sequence[float] = (0.01, 0.001, 0.0001),
                 seed: int = 0, unfreeze: bool = True, batch_size: int = 50,
                 loss_spec: LossSpec | None = None) -> PFLReport:
    """Fine-tune every client at every grid LR and score it on its personal test set.

    ``global_personal`` scores the untouched global model on the same personal
    test sets. Clients with no classes or no data are excluded and listed.
    """
    if not lr_grid:
        raise ValueError("learning-rate grid is empty")
    clients, testsets, excluded = [], {}, []
    for n in range(partition.num_clients):
        try:
            ts = build_personal_testset(test, partition, train, n)
        except EmptyTestsetError:
            excluded.append(n)
            continue
        if len(ts) == 0:
            excluded.append(n)
            continue
        clients.append(n)
        testsets[n] = ts
    base = [evaluate(global_model, testsets[n]) for n in clients]
    global_personal = PersonalResult(base, clients, 0.0, 0, excluded)
    results = []
    for lr in lr_grid:
        accs = []
        for n in clients:
            shard = partition.client_data(train, n)
            tuned = fine_tune(global_model, shard, epochs, lr, client_seed(seed, _PFL_ROUND, n),
                              unfreeze, batch_size, loss_spec)
            accs.append(evaluate(tuned, testsets[n]))
        results.append(PersonalResult(accs, clients, float(lr), epochs, excluded))
    return PFLReport(results, global_personal)


def write_pfl_csv(rows: Sequence[tuple[str, PersonalResult]], path) -> None:
    """One row per (algorithm, LR): mean, std and the ``X±Y`` table cell."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["algorithm", "lr", "epochs", "mean", "std", "cell"])
        for alg, res in rows:
            w.writerow([alg, repr(res.lr), res.epochs, repr(res.mean), repr(res.std),
                        f"{100 * res.mean:.2f}±{100 * res.std:.2f}"])
