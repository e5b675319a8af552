"""Synthetic Gaussian-mixture datasets and client partitioning strategies."""
from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, PartitionInfeasibleError

_SPLIT_TAGS = {"train": 1, "test": 2}
_MAGIC = b"FNDS"


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.ndim != 2 or self.y.shape != (self.x.shape[0],):
            raise ConfigError("dataset inputs must be (n, dim) with one label per row")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise ConfigError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.y)

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def class_index(self) -> dict[int, np.ndarray]:
        return {c: np.flatnonzero(self.y == c) for c in range(self.num_classes)}

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.num_classes)

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.x[idx], self.y[idx], self.num_classes)


@dataclass
class Partition:
    assignments: list[np.ndarray]
    strategy: str
    params: dict = field(default_factory=dict)
    seed: int | None = None

    def __post_init__(self):
        self.assignments = [np.asarray(a, dtype=np.int64) for a in self.assignments]

    @property
    def num_clients(self) -> int:
        return len(self.assignments)

    def sizes(self) -> np.ndarray:
        return np.array([len(a) for a in self.assignments])

    def client_data(self, dataset: Dataset, n: int) -> Dataset:
        return dataset.subset(self.assignments[n])

    def to_dict(self) -> dict:
        return {"strategy": self.strategy, "params": self.params, "seed": self.seed,
                "N": self.num_clients, "assignments": [a.tolist() for a in self.assignments]}

    @classmethod
    def from_dict(cls, d: dict) -> "Partition":
        if len(d["assignments"]) != d["N"]:
            raise ConfigError("partition N does not match the assignment count")
        return cls(d["assignments"], d["strategy"], d.get("params", {}), d.get("seed"))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "Partition":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def validate(self, dataset: Dataset) -> None:
        """Disjointness and index validity; raises ConfigError on violation."""
        allidx = np.concatenate(self.assignments) if self.assignments else np.array([], int)
        if allidx.size and (allidx.min() < 0 or allidx.max() >= len(dataset)):
            raise ConfigError("partition holds an index outside the dataset")
        if len(np.unique(allidx)) != allidx.size:
            raise ConfigError("partition index lists overlap")


def _class_means(num_classes: int, dim: int, spread: float, rng: np.random.Generator) -> np.ndarray:
    if dim >= num_classes:
        q, _ = np.linalg.qr(rng.standard_normal((dim, num_classes)))
        # orthonormal directions sit sqrt(2) apart
        return q.T * (spread / np.sqrt(2.0))
    pts = rng.standard_normal((num_classes, dim))
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    d = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
    nearest = d[~np.eye(num_classes, dtype=bool)].min()
    return pts * (spread / max(nearest, 1e-12))


def gen_synthetic(num_classes: int, dim: int, n_per_class: int, class_separation: float,
                  noise_scale: float, seed: int, split: str = "train") -> Dataset:
    """Balanced Gaussian mixture: ``n_per_class`` draws of ``mean_c + N(0, noise_scale^2 I)``.

    Class means depend on ``seed`` only, so the train and test splits of one seed
    share them; pairwise mean distances are at least ``class_separation * noise_scale``.
    """
    for name, v in (("num_classes", num_classes), ("dim", dim), ("n_per_class", n_per_class)):
        if int(v) <= 0:
            raise ConfigError(f"{name} must be positive")
    if class_separation <= 0 or noise_scale <= 0:
        raise ConfigError("class_separation and noise_scale must be positive")
    if split not in _SPLIT_TAGS:
        raise ConfigError(f"unknown split {split!r}")
    means = _class_means(num_classes, dim, class_separation * noise_scale,
                         np.random.default_rng(np.random.SeedSequence([seed, 0])))
    rng = np.random.default_rng(np.random.SeedSequence([seed, _SPLIT_TAGS[split]]))
    y = np.repeat(np.arange(num_classes), n_per_class)
    x = means[y] + noise_scale * rng.standard_normal((len(y), dim))
    return Dataset(x, y, num_classes)


def nearest_centroid_accuracy(dataset: Dataset) -> float:
    centroids = np.stack([dataset.x[dataset.y == c].mean(axis=0) for c in range(dataset.num_classes)])
    d = ((dataset.x[:, None, :] - centroids[None]) ** 2).sum(-1)
    return float(np.mean(d.argmin(axis=1) == dataset.y))


# ------------------------------------------------------------------ partitions

def _rng(seed: int, tag: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, tag]))


def partition_iid(dataset: Dataset, num_clients: int, seed: int) -> Partition:
    """Every client receives the same number of examples of every class."""
    if num_clients < 1:
        raise ConfigError("number of clients must be positive")
    counts = dataset.class_counts()
    if np.any(counts % num_clients):
        raise ConfigError(f"IID partition needs every class count divisible by N={num_clients}")
    rng = _rng(seed, 11)
    parts: list[list[np.ndarray]] = [[] for _ in range(num_clients)]
    for c, idx in dataset.class_index().items():
        for k, chunk in enumerate(np.split(rng.permutation(idx), num_clients)):
            parts[k].append(chunk)
    return Partition([np.sort(np.concatenate(p)) for p in parts], "iid", {}, seed)


def partition_sharding(dataset: Dataset, num_clients: int, shards_per_client: int, seed: int) -> Partition:
    """Label-sorted data cut into ``N*s`` equal single-class shards, ``s`` dealt per client."""
    n, s = num_clients, shards_per_client
    if n < 1 or s < 1:
        raise ConfigError("number of clients and shards per client must be positive")
    total = len(dataset)
    if total % (n * s):
        raise ConfigError(f"sharding needs |D|={total} divisible by N*s={n * s}")
    shard = total // (n * s)
    counts = dataset.class_counts()
    if np.any(counts % shard):
        raise ConfigError(f"sharding needs shard size {shard} to divide every class count")
    rng = _rng(seed, 12)
    ordered = np.concatenate([rng.permutation(idx) for idx in dataset.class_index().values()])
    shards = ordered.reshape(n * s, shard)
    deal = rng.permutation(n * s).reshape(n, s)
    assignments = [np.sort(shards[row].ravel()) for row in deal]
    return Partition(assignments, "sharding", {"s": s, "shard_size": shard}, seed)


def _integerize(p: np.ndarray, count: int) -> np.ndarray:
    raw = p * count
    base = np.floor(raw).astype(np.int64)
    short = count - int(base.sum())
    if short:
        order = np.argsort(-(raw - base), kind="stable")
        base[order[:short]] += 1
    return base


def partition_lda(dataset: Dataset, num_clients: int, alpha: float, seed: int,
                  min_per_client: int = 0, max_retries: int = 100) -> Partition:
    """Per-class symmetric Dirichlet(alpha) shares over clients.

    Counts are ``floor(p * |D(c)|)`` with the remainder going to the largest
    fractional parts. The whole draw repeats while any client falls below
    ``min_per_client``.
    """
    if alpha <= 0:
        raise ConfigError("alpha must be positive")
    if num_clients < 1:
        raise ConfigError("number of clients must be positive")
    rng = _rng(seed, 13)
    index = dataset.class_index()
    for _ in range(max_retries):
        parts: list[list[np.ndarray]] = [[] for _ in range(num_clients)]
        shares = []
        for c, idx in index.items():
            p = rng.dirichlet(np.full(num_clients, float(alpha)))
            shares.append(p)
            counts = _integerize(p, len(idx))
            cuts = np.cumsum(counts)[:-1]
            for k, chunk in enumerate(np.split(rng.permutation(idx), cuts)):
                parts[k].append(chunk)
        assignments = [np.sort(np.concatenate(p)) for p in parts]
        if min(len(a) for a in assignments) >= min_per_client:
            return Partition(assignments, "lda",
                             {"alpha": alpha, "min_per_client": min_per_client,
                              "shares": np.array(shares).tolist()}, seed)
    raise PartitionInfeasibleError(
        f"no LDA draw gave every client >= {min_per_client} examples in {max_retries} tries")


def client_classes(partition: Partition, dataset: Dataset, n: int) -> set[int]:
    if not 0 <= n < partition.num_clients:
        raise IndexError(f"client {n} out of range")
    return {int(c) for c in np.unique(dataset.y[partition.assignments[n]])}


def make_partition(dataset: Dataset, strategy: str, num_clients: int, seed: int, **kw) -> Partition:
    if strategy == "iid":
        return partition_iid(dataset, num_clients, seed)
    if strategy == "sharding":
        return partition_sharding(dataset, num_clients, int(kw["s"]), seed)
    if strategy == "lda":
        return partition_lda(dataset, num_clients, float(kw["alpha"]), seed,
                             int(kw.get("min_per_client", 0)))
    raise ConfigError(f"unknown partition strategy {strategy!r}")


# --------------------------------------------------------------------- export

def save_dataset_binary(dataset: Dataset, path) -> None:
    """Magic, little-endian u32 (n, dim, C), f64 inputs row-major, u32 labels."""
    n, dim = dataset.x.shape
    with open(path, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<III", n, dim, dataset.num_classes))
        fh.write(dataset.x.astype("<f8").tobytes())
        fh.write(dataset.y.astype("<u4").tobytes())


def load_dataset_binary(path) -> Dataset:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ConfigError(f"{path}: not a dataset file")
    n, dim, c = struct.unpack("<III", raw[4:16])
    xs = np.frombuffer(raw, dtype="<f8", count=n * dim, offset=16).reshape(n, dim)
    ys = np.frombuffer(raw, dtype="<u4", count=n, offset=16 + 8 * n * dim)
    return Dataset(xs.astype(np.float64), ys.astype(np.int64), c)


def save_dataset_csv(dataset: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i}" for i in range(dataset.dim)] + ["label"])
        for row, label in zip(dataset.x, dataset.y):
            w.writerow([repr(float(v)) for v in row] + [int(label)])
