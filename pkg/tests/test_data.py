import numpy as np
import pytest

from fedafd.data import IID, NON_IID, load, mean_pairwise_tv, save, synthesize
from fedafd.model import Batch, evaluate, init_params, local_train, mlp


def make(mode, seed=0, **kw):
    args = dict(n_clients=4, n_per_client=100, n_classes=10, dim=32)
    args.update(kw)
    return synthesize(mode=mode, rng=np.random.default_rng(seed), seed=seed, **args)


def test_iid_class_counts_within_three_sigma():
    n, c = 100, 10
    p = 1 / c
    sigma = np.sqrt(n * p * (1 - p))
    for seed in range(5):
        ds = make(IID, seed)
        counts = ds.label_distributions() * n
        assert np.all(np.abs(counts - n * p) <= 3 * sigma)


def test_non_iid_at_most_two_labels_per_client():
    ds = make(NON_IID, n_clients=100)
    for client in ds.clients:
        labels = np.concatenate([client.train.labels, client.test.labels])
        assert len(np.unique(labels)) <= 2


def test_non_iid_skew_metric():
    ds = make(NON_IID, n_clients=100)
    assert mean_pairwise_tv(ds.label_distributions()) >= 0.5
    assert mean_pairwise_tv(make(IID, n_clients=20).label_distributions()) < 0.5


def test_total_variation_hand_example():
    dist = np.array([[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]])
    assert mean_pairwise_tv(dist) == pytest.approx((1.0 + 0.5 + 0.5) / 3)


@pytest.mark.parametrize("n, n_test", [(100, 20), (10, 2), (7, 1), (5, 1), (3, 1)])
def test_split_sizes(n, n_test):
    ds = make(IID, n_per_client=n)
    for client in ds.clients:
        assert len(client.test) == n_test and len(client.train) == n - n_test


def test_shards_partition_generated_examples():
    ds = make(NON_IID, n_clients=10)
    for client in ds.clients:
        rows = np.concatenate([client.train.inputs, client.test.inputs])
        assert len({r.tobytes() for r in rows}) == 100


def test_same_seed_same_bytes():
    a, b = make(NON_IID, 3), make(NON_IID, 3)
    for x, y in zip(a.clients, b.clients):
        assert x.train.inputs.tobytes() == y.train.inputs.tobytes()
        assert x.test.labels.tobytes() == y.test.labels.tobytes()
    c = make(NON_IID, 4)
    assert c.clients[0].train.inputs.tobytes() != a.clients[0].train.inputs.tobytes()


@pytest.mark.parametrize(
    "kw",
    [dict(n_clients=0), dict(n_per_client=0), dict(n_classes=0), dict(dim=0), dict(n_classes=1, mode=NON_IID)],
)
def test_invalid_counts_rejected(kw):
    mode = kw.pop("mode", IID)
    with pytest.raises(ValueError):
        make(mode, **kw)


def test_centrally_trained_mlp_is_accurate():
    ds = make(IID, n_clients=20)
    arch = mlp(32, [64], 10)
    rng = np.random.default_rng(0)
    params = init_params(arch, rng)
    train = ds.pooled_train()
    params, _ = local_train(arch, params, train, 50, 10, 0.05, rng)
    acc, _ = evaluate(arch, params, ds.pooled_test())
    assert acc >= 0.90


def test_save_load_round_trip(tmp_path):
    ds = make(NON_IID, 7, n_clients=5, n_per_client=13)
    path = tmp_path / "ds.bin"
    save(ds, path)
    back = load(path)
    assert (back.mode, back.seed, back.num_classes, back.dim) == (ds.mode, ds.seed, ds.num_classes, ds.dim)
    assert back.separation == ds.separation and back.classes_per_client == ds.classes_per_client
    for x, y in zip(ds.clients, back.clients):
        for p, q in ((x.train, y.train), (x.test, y.test)):
            assert isinstance(q, Batch)
            assert p.inputs.tobytes() == q.inputs.tobytes()
            np.testing.assert_array_equal(p.labels, q.labels)
    # header plus per-client counts, features and labels
    n_total = 5 * 13
    assert path.stat().st_size == 44 + 5 * 8 + n_total * (8 * 32 + 4)


def test_load_rejects_garbage(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"NOPE" + bytes(60))
    with pytest.raises(ValueError):
        load(path)
