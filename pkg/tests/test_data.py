import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rgal.data import (
    AccessAudit,
    DataPool,
    LabeledDataset,
    load_dataset_csv,
    make_image_dataset,
    make_toy_dataset,
    pool_sample,
    pool_update,
    pretrain_teacher,
    save_dataset_csv,
)
from rgal.models import mlp_classifier


def test_toy_counts_and_determinism():
    ds = make_toy_dataset(100, seed=3)
    assert ds.samples.shape == (300, 2)
    assert np.bincount(ds.labels).tolist() == [100, 100, 100]
    again = make_toy_dataset(100, seed=3)
    assert np.array_equal(ds.samples, again.samples) and np.array_equal(ds.labels, again.labels)


@settings(max_examples=20, deadline=None)
@given(st.integers(2, 60), st.integers(0, 2**31))
def test_toy_balanced(n, seed):
    assert np.bincount(make_toy_dataset(n, seed=seed).labels).tolist() == [n] * 3


def test_linear_probe_separates_blobs():
    # one-vs-rest least squares on [x, 1] as an independent oracle
    train, test = make_toy_dataset(100, seed=0), make_toy_dataset(200, seed=1)
    X = np.hstack([train.samples, np.ones((len(train), 1))])
    W, *_ = np.linalg.lstsq(X, np.eye(3)[train.labels], rcond=None)
    pred = np.argmax(np.hstack([test.samples, np.ones((len(test), 1))]) @ W, axis=1)
    assert np.mean(pred == test.labels) >= 0.95


def test_dataset_validation():
    with pytest.raises(ValueError):
        LabeledDataset(np.zeros((3, 2)), np.zeros(2, dtype=int), 3)
    with pytest.raises(ValueError):
        make_toy_dataset(1)


def test_csv_round_trip(tmp_path):
    ds = make_toy_dataset(5, seed=2)
    save_dataset_csv(tmp_path / "d.csv", ds)
    back = load_dataset_csv(tmp_path / "d.csv", num_classes=3)
    assert np.array_equal(back.samples, ds.samples) and np.array_equal(back.labels, ds.labels)


def test_image_dataset_shape():
    ds = make_image_dataset(4, seed=0, size=8)
    assert ds.samples.shape == (12, 3, 8, 8)
    assert ds.samples.min() >= 0 and ds.samples.max() <= 1


def test_teacher_accuracy(toy_teacher):
    _, _, acc = toy_teacher
    assert acc >= 0.98


def test_zero_epochs_is_identity():
    ds = make_toy_dataset(10, seed=0)
    init = mlp_classifier(5).state_dict()
    trained = pretrain_teacher(ds, epochs=0, seed=5, model=mlp_classifier(5))
    assert all(np.array_equal(init[k], v) for k, v in trained.state_dict().items())


def test_pretrain_deterministic():
    ds = make_toy_dataset(20, seed=0)
    a = pretrain_teacher(ds, epochs=3, seed=1).state_dict()
    b = pretrain_teacher(ds, epochs=3, seed=1).state_dict()
    assert all(np.array_equal(a[k], b[k]) for k in a)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_pretrain_divergence_is_reported():
    ds = make_toy_dataset(20, seed=0)
    with pytest.raises(FloatingPointError, match="epoch"):
        pretrain_teacher(ds, epochs=5, seed=0, lr=1e200)


def test_pool_examples():
    pool = DataPool(capacity=256)
    pool_update(pool, np.zeros((64, 2)), np.zeros(64, dtype=int), np.ones(64))
    assert len(pool) == 64

    pool = DataPool(capacity=2)
    pool.update(np.array([[1.0], [3.0]]), [0, 1], [1.0, 3.0])
    pool.update(np.array([[2.0]]), [0], [2.0])
    assert sorted(pool.losses.tolist()) == [1.0, 2.0]

    full = DataPool(capacity=2)
    full.update(np.array([[1.0], [3.0]]), [0, 1], [1.0, 3.0])
    snapshot = full.samples.copy()
    full.update(np.array([[9.0], [8.0]]), [2, 2], [4.0, 5.0])
    assert np.array_equal(full.samples, snapshot)


def test_empty_pool_sampling_errors():
    with pytest.raises(ValueError, match="synthesis"):
        pool_sample(DataPool(), 4, np.random.default_rng(0))


def test_single_class_pool_warns_downstream():
    from rgal.sampling import SamplingConfig, draw_triplets
    pool = DataPool(capacity=8).update(np.random.default_rng(0).random((6, 2)), np.zeros(6, dtype=int), 0.0)
    idx, x, y = pool_sample(pool, 4, np.random.default_rng(1))
    with pytest.warns(RuntimeWarning, match="single label"):
        trip = draw_triplets(y, np.full((4, 3), 1 / 3), SamplingConfig(), "random", np.random.default_rng(2))
    assert trip.warning


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 12),
       st.lists(st.lists(st.sampled_from([0.0, 0.5, 1.0, 1.5, 2.0, 3.0]), min_size=1, max_size=6),
                min_size=1, max_size=8))
def test_pool_matches_sort_merge_oracle(capacity, batches):
    pool = DataPool(capacity=capacity)
    oracle = []  # (loss, insertion stamp)
    stamp = 0
    for losses in batches:
        n = len(losses)
        pool.update(np.arange(stamp, stamp + n, dtype=float)[:, None], np.arange(n) % 3, losses)
        oracle = sorted(oracle + [(l, stamp + i) for i, l in enumerate(losses)])[:capacity]
        stamp += n
        assert len(pool) <= capacity
        assert list(zip(pool.losses.tolist(), pool.order.tolist())) == oracle
        assert pool.samples[:, 0].tolist() == [float(s) for _, s in oracle]


def test_pool_sample_bounds_and_pairing():
    rng = np.random.default_rng(0)
    pool = DataPool(capacity=50).update(rng.random((40, 2)), rng.integers(0, 3, 40), rng.random(40))
    for _ in range(10_000 // 8):
        idx, x, y = pool_sample(pool, 8, rng)
        assert np.all((idx >= 0) & (idx < len(pool)))
        assert np.array_equal(y[4:], y[:4])
        assert np.array_equal(x, pool.samples[idx])


def test_pool_state_round_trip():
    rng = np.random.default_rng(0)
    pool = DataPool(capacity=10).update(rng.random((6, 2)), [0, 1, 2, 0, 1, 2], rng.random(6))
    back = DataPool.from_state(10, pool.inserted, pool.state())
    for k in ("samples", "labels", "losses", "order"):
        assert np.array_equal(getattr(pool, k), getattr(back, k))


def test_access_audit_counts_reads():
    audit = AccessAudit(make_toy_dataset(3))
    assert audit.reads == 0
    _ = audit.samples
    _ = audit.labels
    assert audit.reads == 2
