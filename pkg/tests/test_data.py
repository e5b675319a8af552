import numpy as np
import pytest

from fednorm import data as D
from fednorm.errors import ConfigError, PartitionInfeasibleError


@pytest.fixture(scope="module")
def ds():
    return D.gen_synthetic(10, 8, 50, 3.0, 1.0, seed=0)


def assert_disjoint_cover(part, dataset):
    allidx = np.concatenate(part.assignments)
    assert len(np.unique(allidx)) == allidx.size
    assert set(allidx.tolist()) == set(range(len(dataset)))


# ----------------------------------------------------------------- synthetic

def test_synthetic_is_balanced(ds):
    assert len(ds) == 500
    assert ds.class_counts().tolist() == [50] * 10


def test_synthetic_is_deterministic():
    a = D.gen_synthetic(4, 5, 7, 2.0, 1.0, seed=3)
    b = D.gen_synthetic(4, 5, 7, 2.0, 1.0, seed=3)
    assert a.x.tobytes() == b.x.tobytes() and np.array_equal(a.y, b.y)
    c = D.gen_synthetic(4, 5, 7, 2.0, 1.0, seed=4)
    assert not np.array_equal(a.x, c.x)


def test_train_and_test_splits_share_class_means():
    tr = D.gen_synthetic(3, 4, 2000, 5.0, 0.5, seed=2)
    te = D.gen_synthetic(3, 4, 2000, 5.0, 0.5, seed=2, split="test")
    assert not np.array_equal(tr.x, te.x)
    for c in range(3):
        assert np.linalg.norm(tr.x[tr.y == c].mean(0) - te.x[te.y == c].mean(0)) < 0.1


@pytest.mark.parametrize("dim", [16, 3])
def test_class_means_respect_separation(dim):
    ds = D.gen_synthetic(6, dim, 4000, 4.0, 0.5, seed=5)
    means = np.stack([ds.x[ds.y == c].mean(0) for c in range(6)])
    d = np.linalg.norm(means[:, None] - means[None], axis=-1)[~np.eye(6, dtype=bool)]
    assert d.min() > 4.0 * 0.5 * 0.95


def test_separated_data_is_nearest_centroid_separable():
    ds = D.gen_synthetic(10, 16, 50, 12.0, 0.5, seed=1)
    assert D.nearest_centroid_accuracy(ds) > 0.99


def test_synthetic_validation():
    with pytest.raises(ConfigError):
        D.gen_synthetic(0, 4, 5, 1.0, 1.0, 0)
    with pytest.raises(ConfigError):
        D.gen_synthetic(3, 4, 5, 1.0, 0.0, 0)


# ----------------------------------------------------------------------- IID

def test_iid_partition(ds):
    part = D.partition_iid(ds, 10, seed=1)
    assert_disjoint_cover(part, ds)
    for n in range(10):
        labels = ds.y[part.assignments[n]]
        assert len(labels) == 50
        assert np.bincount(labels, minlength=10).tolist() == [5] * 10
        assert D.client_classes(part, ds, n) == set(range(10))


def test_iid_single_client_is_everything(ds):
    part = D.partition_iid(ds, 1, seed=0)
    assert part.assignments[0].tolist() == list(range(len(ds)))


def test_iid_divisibility(ds):
    with pytest.raises(ConfigError):
        D.partition_iid(ds, 7, seed=0)


# ------------------------------------------------------------------ sharding

def test_sharding_example(ds):
    part = D.partition_sharding(ds, 10, 2, seed=0)
    assert part.params["shard_size"] == 25
    assert_disjoint_cover(part, ds)
    for n in range(10):
        assert len(part.assignments[n]) == 50
        assert len(D.client_classes(part, ds, n)) <= 2


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("s", [1, 2, 5, 10])
def test_sharding_invariants(ds, seed, s):
    part = D.partition_sharding(ds, 10, s, seed)
    shard = part.params["shard_size"]
    assert_disjoint_cover(part, ds)
    for n in range(10):
        counts = np.bincount(ds.y[part.assignments[n]], minlength=10)
        # a union of s equal single-class shards
        assert np.all(counts % shard == 0) and counts.sum() == s * shard
        assert np.count_nonzero(counts) <= s


def test_sharding_with_s_equal_classes_allows_all_classes(ds):
    seen = [len(D.client_classes(D.partition_sharding(ds, 10, 10, seed), ds, 0)) for seed in range(10)]
    assert max(seen) <= 10 and max(seen) > 2


def test_sharding_divisibility(ds):
    with pytest.raises(ConfigError, match="divisible"):
        D.partition_sharding(ds, 7, 2, seed=0)
    with pytest.raises(ConfigError, match="divisible"):
        D.partition_sharding(ds, 10, 4, seed=0)
    small = D.gen_synthetic(3, 2, 10, 1.0, 1.0, 0)
    with pytest.raises(ConfigError, match="shard size"):
        D.partition_sharding(small, 2, 5, seed=0)  # shard 3 does not divide 10


# ----------------------------------------------------------------------- LDA

@pytest.mark.parametrize("alpha", [0.1, 1.0, 1000.0])
def test_lda_conserves_class_counts(ds, alpha):
    for seed in range(20):
        part = D.partition_lda(ds, 10, alpha, seed)
        assert_disjoint_cover(part, ds)
        total = np.zeros(10, int)
        for a in part.assignments:
            total += np.bincount(ds.y[a], minlength=10)
        assert total.tolist() == ds.class_counts().tolist()


def test_lda_integerization_largest_remainder():
    counts = D._integerize(np.array([0.25, 0.25, 0.5]), 7)
    # raw = 1.75, 1.75, 3.5 -> floors 1,1,3 and two remainders to the largest fractions
    assert counts.tolist() == [2, 2, 3]
    assert D._integerize(np.array([1 / 3] * 3), 10).sum() == 10


def test_lda_concentrated_shares_are_near_uniform():
    big = D.Dataset(np.zeros((10000, 1)), np.repeat(np.arange(10), 1000), 10)
    for seed in range(100):
        part = D.partition_lda(big, 10, 1000.0, seed)
        for a in part.assignments:
            counts = np.bincount(big.y[a], minlength=10)
            assert np.all(np.abs(counts - 100) <= 20)


def mean_max_share(dataset, alpha, seeds):
    out = []
    for seed in seeds:
        part = D.partition_lda(dataset, 10, alpha, seed)
        per_client = np.stack([np.bincount(dataset.y[a], minlength=10) for a in part.assignments])
        out.append(np.mean(per_client.max(axis=0) / dataset.class_counts()))
    return float(np.mean(out))


def test_lda_heterogeneity_decreases_with_alpha(ds):
    shares = [mean_max_share(ds, a, range(50)) for a in (0.1, 1.0, 10.0, 1000.0)]
    assert all(a > b for a, b in zip(shares, shares[1:])), shares


def test_lda_determinism(ds):
    a = D.partition_lda(ds, 10, 0.5, seed=9).to_dict()
    b = D.partition_lda(ds, 10, 0.5, seed=9).to_dict()
    assert a == b


def test_lda_min_per_client_retry_and_failure(ds):
    part = D.partition_lda(ds, 10, 0.5, seed=2, min_per_client=10)
    assert part.sizes().min() >= 10
    with pytest.raises(PartitionInfeasibleError):
        D.partition_lda(ds, 10, 0.05, seed=2, min_per_client=50, max_retries=5)
    with pytest.raises(ConfigError):
        D.partition_lda(ds, 10, 0.0, seed=2)


# ------------------------------------------------------------ client classes

def test_client_classes_empty_client(ds):
    part = D.Partition([np.arange(10), np.array([], dtype=int)], "manual")
    assert D.client_classes(part, ds, 1) == set()


def test_sharding_determinism_bytes(ds):
    a = D.partition_sharding(ds, 10, 2, 4)
    b = D.partition_sharding(ds, 10, 2, 4)
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a.assignments, b.assignments))


# ------------------------------------------------------------------- export

def test_partition_json_roundtrip(ds, tmp_path):
    part = D.partition_sharding(ds, 10, 2, seed=3)
    part.save(tmp_path / "p.json")
    back = D.Partition.load(tmp_path / "p.json")
    assert back.strategy == "sharding" and back.seed == 3 and back.params == part.params
    assert all(np.array_equal(a, b) for a, b in zip(part.assignments, back.assignments))
    import json
    raw = json.loads((tmp_path / "p.json").read_text())
    assert set(raw) == {"strategy", "params", "seed", "N", "assignments"} and raw["N"] == 10


def test_dataset_binary_and_csv(ds, tmp_path):
    D.save_dataset_binary(ds, tmp_path / "d.bin")
    back = D.load_dataset_binary(tmp_path / "d.bin")
    assert back.x.tobytes() == ds.x.tobytes() and np.array_equal(back.y, ds.y)
    assert back.num_classes == ds.num_classes
    D.save_dataset_csv(ds, tmp_path / "d.csv")
    rows = np.loadtxt(tmp_path / "d.csv", delimiter=",", skiprows=1)
    assert np.array_equal(rows[:, :-1], ds.x) and np.array_equal(rows[:, -1].astype(int), ds.y)
