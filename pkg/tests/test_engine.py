import numpy as np
import pytest

from fednorm import engine as E
from fednorm.data import Dataset, gen_synthetic, partition_iid, partition_sharding
from fednorm.errors import ConfigError, DegenerateNormError
from fednorm.model import HeadKind, HeadSpec, ModelParams, init_model


@pytest.fixture(scope="module")
def small():
    train = gen_synthetic(4, 6, 20, 3.0, 1.0, seed=0)
    test = gen_synthetic(4, 6, 20, 3.0, 1.0, seed=0, split="test")
    return train, test


def cfg(**kw):
    base = dict(num_clients=4, fraction=0.5, rounds=6, local_epochs=2, batch_size=10, lr=0.05,
                seed=1, layer_sizes=(8, 5))
    base.update(kw)
    return E.FLConfig(**base)


# ------------------------------------------------------------ sampling / lr

def test_sample_clients_tenth_fraction():
    picked = E.sample_clients(100, 0.1, round=3, seed=0)
    assert len(picked) == 10 and len(set(picked)) == 10
    assert all(0 <= i < 100 for i in picked)


def test_sample_clients_full_and_deterministic():
    assert E.sample_clients(7, 1.0, 0, 0) == list(range(7))
    assert E.sample_clients(20, 0.25, 5, 9) == E.sample_clients(20, 0.25, 5, 9)
    rounds = {tuple(E.sample_clients(20, 0.25, r, 9)) for r in range(10)}
    assert len(rounds) > 1
    assert len(E.sample_clients(20, 0.01, 0, 0)) == 1


def test_sample_clients_is_roughly_uniform():
    hits = np.zeros(10)
    for r in range(2000):
        hits[E.sample_clients(10, 0.3, r, 4)] += 1
    assert np.all(np.abs(hits / 2000 - 0.3) < 0.04)


def test_lr_schedule_boundaries():
    assert E.lr_at_round(0.01, 320, 0) == 0.01
    assert E.lr_at_round(0.01, 320, 159) == 0.01
    assert E.lr_at_round(0.01, 320, 160) == 0.001
    assert E.lr_at_round(0.01, 320, 239) == 0.001
    assert E.lr_at_round(0.01, 320, 240) == 0.0001
    assert E.lr_at_round(0.01, 320, 319) == 0.0001


def test_lr_schedule_smallest_and_monotone():
    assert [E.lr_at_round(1.0, 4, r) for r in range(4)] == [1.0, 1.0, 0.1, 0.01]
    seq = [E.lr_at_round(0.3, 37, r) for r in range(37)]
    assert all(a >= b for a, b in zip(seq, seq[1:]))
    with pytest.raises(ValueError):
        E.lr_at_round(0.1, 4, 4)


def test_config_validation():
    with pytest.raises(ConfigError, match="fraction must be positive"):
        cfg(fraction=0.0)
    with pytest.raises(ConfigError):
        cfg(batch_size=0)
    assert cfg(num_clients=10, fraction=0.25).clients_per_round == 3
    h, l, frozen = E.algorithm_specs("spherefed_mse", tau=15.0)
    assert h.kind is HeadKind.FROZEN_ORTHONORMAL and h.tau == 15.0 and frozen
    assert E.algorithm_specs("fedbabu")[2] is True


# ---------------------------------------------------------------- local train

def test_local_train_zero_lr_is_identity(small):
    train, _ = small
    m = init_model(6, (8, 5), 4, seed=2)
    out = E.local_train(m, train, 2, 7, 0.0, seed=0)
    assert all(a.tobytes() == b.tobytes() for a, b in zip(m.arrays(), out.arrays()))


def test_local_train_leaves_input_untouched(small):
    train, _ = small
    m = init_model(6, (8, 5), 4, seed=2)
    before = m.flat().copy()
    out = E.local_train(m, train, 1, 10, 0.1, seed=0)
    assert np.array_equal(m.flat(), before) and not np.array_equal(out.flat(), before)


def hand_sgd_step(w, b, c, x, y, lr):
    """One full-batch SGD step for f = w*x + b, z = c*f, derived by hand."""
    f = w * x + b
    z = np.outer(f, c)
    p = np.exp(z - z.max(1, keepdims=True))
    p /= p.sum(1, keepdims=True)
    dz = p - np.eye(len(c))[y]
    df = dz @ c
    n = len(x)
    return (w - lr * np.sum(df * x) / n, b - lr * np.sum(df) / n, c - lr * (dz.T @ f) / n)


def test_local_train_single_full_batch_step():
    x = np.array([0.5, -1.0, 2.0, 1.5])
    y = np.array([0, 1, 1, 0])
    w, b, c = 0.7, -0.2, np.array([1.3, -0.4])
    m = ModelParams([(np.array([[w]]), np.array([b]))], c[:, None])
    out = E.local_train(m, Dataset(x[:, None], y, 2), 1, 4, 0.3, seed=0)
    w2, b2, c2 = hand_sgd_step(w, b, c, x, y, 0.3)
    assert out.layers[0][0][0, 0] == pytest.approx(w2, abs=1e-14)
    assert out.layers[0][1][0] == pytest.approx(b2, abs=1e-14)
    np.testing.assert_allclose(out.classifier[:, 0], c2, atol=1e-14)


def test_local_train_keeps_short_last_batch():
    data = Dataset(np.ones((5, 1)), np.array([0, 1, 0, 1, 1]), 2)
    calls = []
    m = ModelParams([(np.array([[1.0]]), np.array([0.0]))], np.array([[1.0], [-1.0]]))
    import fednorm.engine as eng
    real = eng.loss_and_grads
    try:
        eng.loss_and_grads = lambda spec, p, xb, yb: (calls.append(len(yb)), real(spec, p, xb, yb))[1]
        E.local_train(m, data, 2, 2, 0.1, seed=0)
    finally:
        eng.loss_and_grads = real
    assert calls == [2, 2, 1, 2, 2, 1]


def test_frozen_classifier_untouched(small):
    train, _ = small
    m = init_model(6, (8, 5), 4, seed=3, frozen_classifier=True)
    out = E.local_train(m, train, 3, 5, 0.5, seed=1)
    assert out.classifier.tobytes() == m.classifier.tobytes()
    assert not np.array_equal(out.layers[0][0], m.layers[0][0])


def test_degenerate_norm_reports_client_and_batch(small):
    train, _ = small
    m = init_model(6, (8, 5), 4, HeadSpec(HeadKind.NORMALIZED_FEATURE), seed=1)
    zero = ModelParams([(np.zeros_like(w), np.zeros_like(b)) for w, b in m.layers], m.classifier, m.head)
    with pytest.raises(DegenerateNormError, match="client 3, epoch 0, batch 0"):
        E.local_train(zero, train, 1, 10, 0.1, seed=0, client=3)


# -------------------------------------------------------------------- aggregate

def test_aggregate_fixed_point_and_projection():
    rng = np.random.default_rng(0)
    a = init_model(3, (4, 2), 3, seed=1)
    same = E.aggregate([a, a.copy(), a.copy()], [0.2, 0.3, 0.5])
    np.testing.assert_allclose(same.flat(), a.flat(), rtol=0, atol=1e-15)
    b = init_model(3, (4, 2), 3, seed=2)
    first = E.aggregate([a, b], [1.0, 0.0])
    assert np.array_equal(first.flat(), a.flat())
    del rng


def test_aggregate_matches_flat_weighted_mean():
    rng = np.random.default_rng(5)
    for _ in range(20):
        models = [init_model(4, (6, 3), 5, seed=int(s)) for s in rng.integers(1 << 20, size=4)]
        w = rng.dirichlet(np.ones(4))
        w[-1] = 1.0 - w[:-1].sum()
        oracle = sum(wk * m.flat() for wk, m in zip(w, models))
        np.testing.assert_allclose(E.aggregate(models, w).flat(), oracle, rtol=0, atol=1e-12)


def test_aggregate_errors():
    a, b = init_model(3, (4,), 2, seed=1), init_model(3, (5,), 2, seed=1)
    with pytest.raises(ConfigError, match="sum to 1"):
        E.aggregate([a, a], [0.5, 0.6])
    with pytest.raises(ConfigError, match="non-negative"):
        E.aggregate([a, a], [1.5, -0.5])
    with pytest.raises(ConfigError, match="architecture"):
        E.aggregate([a, b], [0.5, 0.5])


def test_aggregate_passes_frozen_classifier_verbatim():
    a = init_model(3, (4,), 2, HeadSpec(HeadKind.FROZEN_ORTHONORMAL), seed=1)
    b = a.copy()
    b.layers[0][0][...] += 1.0
    out = E.aggregate([a, b], [0.3, 0.7])
    assert out.classifier.tobytes() == a.classifier.tobytes()


# --------------------------------------------------------------------- evaluate

def test_evaluate_perfect_and_adversarial():
    x = np.eye(3)
    m = ModelParams([(np.eye(3), np.zeros(3))], np.eye(3))
    assert E.evaluate(m, Dataset(x, [0, 1, 2], 3)) == 1.0
    assert E.evaluate(m, Dataset(x, [1, 2, 0], 3)) == 0.0


def test_evaluate_ties_go_to_lowest_class():
    m = ModelParams([(np.eye(2), np.zeros(2))], np.ones((3, 2)))
    assert E.evaluate(m, Dataset(np.array([[1.0, 2.0]]), [0], 3)) == 1.0


def test_evaluate_head_invariance_on_prenormalized_inputs():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(50, 4))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    data = Dataset(x, rng.integers(3, size=50), 3)
    cls = rng.normal(size=(3, 4))
    std = ModelParams([(np.eye(4), np.zeros(4))], cls)
    fn = ModelParams([(np.eye(4), np.zeros(4))], cls, HeadSpec(HeadKind.NORMALIZED_FEATURE))
    assert E.evaluate(std, data) == E.evaluate(fn, data)


# ---------------------------------------------------------------- run_federated

def test_single_client_matches_centralized(small):
    train, test = small
    c = cfg(num_clients=1, fraction=1.0, rounds=5)
    res = E.run_federated(c, train, test, partition_iid(train, 1, 0))
    central = E.train_centralized(c, train)
    assert res.model.flat().tobytes() == central.flat().tobytes()
    assert res.final_accuracy == E.evaluate(central, test)


def test_zero_rounds_returns_initial(small):
    train, test = small
    res = E.run_federated(cfg(rounds=0), train, test, partition_iid(train, 4, 0))
    assert res.metrics == [] and np.array_equal(res.model.flat(), res.initial_model.flat())


def test_run_is_deterministic(small):
    train, test = small
    part = partition_sharding(train, 4, 2, 0)
    a = E.run_federated(cfg(), train, test, part)
    b = E.run_federated(cfg(), train, test, part)
    assert E.metrics_jsonl(a.metrics) == E.metrics_jsonl(b.metrics)
    assert a.model.flat().tobytes() == b.model.flat().tobytes()


def test_parallel_clients_match_serial(small):
    train, test = small
    part = partition_sharding(train, 4, 2, 0)
    a = E.run_federated(cfg(), train, test, part)
    b = E.run_federated(cfg(), train, test, part, max_workers=3)
    assert a.model.flat().tobytes() == b.model.flat().tobytes()


def test_fedfr_zero_mu_matches_fedavg(small):
    train, test = small
    part = partition_sharding(train, 4, 2, 0)
    a = E.run_federated(cfg(algorithm="fedavg"), train, test, part)
    b = E.run_federated(cfg(algorithm="fedfr", mu=0.0), train, test, part)
    assert [(m.acc, m.loss, m.lr) for m in a.metrics] == [(m.acc, m.loss, m.lr) for m in b.metrics]


@pytest.mark.parametrize("alg", ["fedbabu", "spherefed_ce", "spherefed_mse"])
def test_frozen_algorithms_keep_initial_classifier(small, alg):
    train, test = small
    res = E.run_federated(cfg(algorithm=alg, tau=15.0 if alg == "spherefed_ce" else 1.0), train, test,
                          partition_sharding(train, 4, 2, 0))
    assert res.model.classifier.tobytes() == res.initial_model.classifier.tobytes()


def test_balanced_sharding_uses_uniform_weights(small, monkeypatch):
    train, test = small
    seen = []
    real = E.aggregate
    monkeypatch.setattr(E, "aggregate", lambda models, w: (seen.append(np.asarray(w)), real(models, w))[1])
    E.run_federated(cfg(), train, test, partition_sharding(train, 4, 2, 0))
    for w in seen:
        assert abs(w.sum() - 1.0) <= 1e-12
        np.testing.assert_array_equal(w, np.full(len(w), 1.0 / len(w)))


def test_partition_size_must_match(small):
    train, test = small
    with pytest.raises(ConfigError):
        E.run_federated(cfg(num_clients=5), train, test, partition_iid(train, 4, 0))


def test_snapshots_and_metrics_fields(small):
    train, test = small
    res = E.run_federated(cfg(rounds=8), train, test, partition_sharding(train, 4, 2, 0),
                          snapshot_rounds=[3, 7], factor_snapshots=True)
    assert sorted(res.norm_snapshots) == [3, 7] and sorted(res.factor_snapshots) == [3, 7]
    m = res.metrics[-1]
    assert 0.0 <= m.acc <= 1.0 and m.round == 7 and m.lr == pytest.approx(0.0005)
    assert E.default_snapshot_rounds(64) == list(range(3, 64, 4))
