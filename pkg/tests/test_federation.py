import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedafd.compression import payload_size_bytes
from fedafd.config import ExperimentConfig
from fedafd.data import ClientData, FederatedDataset
from fedafd.federation import (
    CodecConfig,
    Simulation,
    aggregate,
    aggregate_trained_only,
    build_dataset,
    client_update,
    run_experiment,
    select_clients,
    server_rebuild,
)
from fedafd.model import Batch, LayerParams, ShapeError, init_params, local_train, loss_and_grad, mlp
from fedafd.submodel import SubModelSpec, coverage_mask, full_spec, select_random

SMALL = ExperimentConfig(
    n_clients=6, samples_per_client=25, n_classes=4, dim=8, hidden=8, partition="iid", rounds=3, fraction=0.5
)


def vec(*xs):
    return [LayerParams(np.array(xs, float), np.zeros(1))]


def as_bytes(params):
    return b"".join(p.weights.tobytes() + p.biases.tobytes() for p in params)


# -- client selection ----------------------------------------------------------


def test_select_all_and_count():
    rng = np.random.default_rng(0)
    assert select_clients(7, 1.0, rng) == list(range(7))
    picked = select_clients(10, 0.3, rng)
    assert len(picked) == 3 == len(set(picked))
    assert select_clients(5, 0.01, rng).__len__() == 1
    with pytest.raises(ValueError):
        select_clients(5, 0.0, rng)


def test_selection_frequencies_within_three_sigma():
    rng = np.random.default_rng(1)
    rounds, n, p = 10_000, 10, 0.3
    counts = np.zeros(n)
    for _ in range(rounds):
        counts[select_clients(n, p, rng)] += 1
    sigma = np.sqrt(p * (1 - p) / rounds)
    assert np.all(np.abs(counts / rounds - p) <= 3 * sigma)


# -- aggregation ---------------------------------------------------------------


def test_aggregate_weighted_example():
    out = aggregate([(vec(0, 4), 1), (vec(4, 8), 3)])
    np.testing.assert_array_equal(out[0].weights, [3.0, 7.0])


def test_aggregate_single_and_identical_are_exact():
    rng = np.random.default_rng(2)
    p = init_params(mlp(5, [7], 3), rng)
    assert as_bytes(aggregate([(p, 13)])) == as_bytes(p)
    assert as_bytes(aggregate([(p, 3), (p, 8), (p, 1)])) == as_bytes(p)


def test_aggregate_errors():
    with pytest.raises(ValueError):
        aggregate([])
    with pytest.raises(ShapeError):
        aggregate([(vec(1, 2), 1), (vec(1, 2, 3), 1)])
    with pytest.raises(ValueError):
        aggregate([(vec(1, 2), 0)])


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31), n_clients=st.integers(2, 7))
def test_aggregate_is_permutation_invariant(seed, n_clients):
    rng = np.random.default_rng(seed)
    arch = mlp(4, [6], 3)
    updates = [(init_params(arch, rng), int(rng.integers(1, 50))) for _ in range(n_clients)]
    perm = rng.permutation(n_clients)
    assert as_bytes(aggregate(updates)) == as_bytes(aggregate([updates[i] for i in perm]))


def test_trained_only_averages_over_trainers():
    glob = vec(10, 10, 10)
    a = (vec(1, 2, 10), 1, vec(1, 1, 0))
    b = (vec(3, 10, 10), 3, vec(1, 0, 0))
    out = aggregate_trained_only(glob, [a, b])
    np.testing.assert_array_equal(out[0].weights, [2.5, 2.0, 10.0])


# -- one-step identity -----------------------------------------------------------


def toy_clients(seed, sizes, dim=4, classes=3):
    rng = np.random.default_rng(seed)
    return [Batch(rng.normal(size=(n, dim)), rng.integers(0, classes, n)) for n in sizes]


@pytest.mark.parametrize("seed", range(5))
def test_one_local_step_equals_weighted_gradient_step(seed):
    arch = mlp(4, [5], 3)
    params = init_params(arch, np.random.default_rng(seed))
    shards = toy_clients(seed, [3, 5, 9])
    lr = 0.1
    results = [
        client_update(arch, params, full_spec(arch), s, lr=lr, epochs=1, batch_size=100, codecs=CodecConfig(),
                      sign_seed=0, rng=np.random.default_rng(c), client=c)
        for c, s in enumerate(shards)
    ]
    new = aggregate([(server_rebuild(arch, params, r, CodecConfig()), r.n_samples) for r in results])
    n_t = sum(len(s) for s in shards)
    assert sum(len(s) / n_t for s in shards) == pytest.approx(1.0, abs=1e-12)
    grads = [loss_and_grad(arch, params, s)[1] for s in shards]
    for k, p in enumerate(params):
        h_w = sum(len(s) / n_t * g[k].weights for s, g in zip(shards, grads))
        h_b = sum(len(s) / n_t * g[k].biases for s, g in zip(shards, grads))
        np.testing.assert_allclose(new[k].weights, p.weights - lr * h_w, rtol=0, atol=1e-9)
        np.testing.assert_allclose(new[k].biases, p.biases - lr * h_b, rtol=0, atol=1e-9)


# -- conservation and byte accounting ------------------------------------------------


@pytest.mark.parametrize(
    "codecs",
    [CodecConfig(), CodecConfig(quant8_down=True, quant8_up=True), CodecConfig(quant8_down=True, dgc=True)],
)
def test_units_dropped_by_everyone_are_untouched(codecs):
    arch = mlp(4, [6], 3)
    params = init_params(arch, np.random.default_rng(0))
    specs = [SubModelSpec({0: (0, 1, 3)}, 0.5), SubModelSpec({0: (1, 3, 4)}, 0.5)]
    shards = toy_clients(1, [6, 8])
    results = [
        client_update(arch, params, sp, sh, lr=0.5, epochs=2, batch_size=3, codecs=codecs, sign_seed=77,
                      rng=np.random.default_rng(c), client=c)
        for c, (sp, sh) in enumerate(zip(specs, shards))
    ]
    new = aggregate([(server_rebuild(arch, params, r, codecs), r.n_samples) for r in results])
    for unit in (2, 5):
        assert new[0].weights[unit].tobytes() == params[0].weights[unit].tobytes()
        assert new[0].biases[unit] == params[0].biases[unit]
        assert new[1].weights[:, unit].tobytes() == params[1].weights[:, unit].tobytes()
    assert not np.array_equal(new[0].weights[1], params[0].weights[1])


def test_dgc_lossless_settings_reproduce_trained_weights():
    arch = mlp(4, [6], 3)
    params = init_params(arch, np.random.default_rng(3))
    spec = SubModelSpec({0: (0, 2, 5)}, 0.5)
    codecs = CodecConfig(dgc=True, dgc_ratio=1.0, dgc_clip=np.inf, dgc_momentum=0.0)
    plain = client_update(arch, params, spec, toy_clients(2, [7])[0], lr=0.3, epochs=1, batch_size=2,
                          codecs=CodecConfig(), sign_seed=0, rng=np.random.default_rng(0))
    sparse = client_update(arch, params, spec, toy_clients(2, [7])[0], lr=0.3, epochs=1, batch_size=2,
                           codecs=codecs, sign_seed=0, rng=np.random.default_rng(0))
    a = server_rebuild(arch, params, plain, CodecConfig())
    b = server_rebuild(arch, params, sparse, codecs)
    for x, y in zip(a, b):
        np.testing.assert_allclose(x.weights, y.weights, rtol=0, atol=1e-14)
        np.testing.assert_array_equal(x.biases, y.biases)


def test_reported_bytes_equal_payload_sum():
    arch = mlp(32, [64], 10)
    params = init_params(arch, np.random.default_rng(0))
    spec = select_random(arch, 0.25, np.random.default_rng(1))
    shard = toy_clients(0, [20], dim=32, classes=10)[0]
    r = client_update(arch, params, spec, shard, lr=0.05, epochs=1, batch_size=10,
                      codecs=CodecConfig(quant8_down=True), sign_seed=5, rng=np.random.default_rng(0))
    # 48x32 weights padded to 2048 plus 16, 48 raw biases, 10x48 padded to 512 plus 16, 10 raw biases
    assert r.down_bytes == (2048 + 16) + 48 * 8 + (512 + 16) + 10 * 8 == 3056
    assert r.up_bytes == 2074 * 8 == sum(payload_size_bytes(b) for b in r.up_blobs)
    full = client_update(arch, params, full_spec(arch), shard, lr=0.05, epochs=1, batch_size=10,
                         codecs=CodecConfig(), sign_seed=5, rng=np.random.default_rng(0))
    assert full.down_bytes == full.up_bytes == 2762 * 8
    assert full.down_bytes / r.down_bytes >= 4


def test_fd_downlink_always_below_baseline():
    base = Simulation(SMALL.replace(mode="none"), 1)
    fd = Simulation(SMALL.replace(mode="fd"), 1)
    full = base.step().down_bytes
    for _ in range(5):
        m = fd.step()
        assert all(b < full[next(iter(full))] for b in m.down_bytes.values())


def test_round_metrics_match_counters():
    sim = Simulation(SMALL.replace(mode="afd_multi", quant8_down=True, dgc=True), 4)
    down = up = 0
    for _ in range(4):
        m = sim.step()
        down += m.total_down
        up += m.total_up
        assert m.seconds > 0 and set(m.losses) == set(m.clients)
    assert (sim.cum_down, sim.cum_up) == (down, up)
    assert sim.ledger.cumulative_seconds == pytest.approx(sum(e.total_s for e in sim.ledger.entries), abs=1e-12)


def test_afd_quant8_cumulative_bytes_quarter_of_baseline():
    cfg = ExperimentConfig(n_clients=20, samples_per_client=30, rounds=5)
    base = run_experiment(cfg, 1)[-1]
    afd = run_experiment(cfg.replace(mode="afd_multi", quant8_down=True, quant8_up=True), 1)[-1]
    assert afd["cum_down_bytes"] + afd["cum_up_bytes"] <= 0.25 * (base["cum_down_bytes"] + base["cum_up_bytes"])
    down_only = run_experiment(cfg.replace(mode="afd_multi", quant8_down=True), 1)[-1]
    assert down_only["cum_down_bytes"] <= 0.25 * base["cum_down_bytes"]


# -- experiment loop -----------------------------------------------------------------


def test_zero_rounds_gives_initial_row_only():
    rows = run_experiment(SMALL.replace(rounds=0), 1)
    assert len(rows) == 1 and rows[0]["round"] == 0 and rows[0]["cum_seconds"] == 0.0
    assert rows[0]["train_loss"] is None


def test_rows_follow_eval_schedule():
    rows = run_experiment(SMALL.replace(rounds=7, eval_every=3), 1)
    assert [r["round"] for r in rows] == [0, 3, 6, 7]


def test_same_seed_same_rows():
    cfg = SMALL.replace(mode="afd_multi", quant8_down=True, dgc=True, rounds=4)
    assert run_experiment(cfg, 9) == run_experiment(cfg, 9)
    assert run_experiment(cfg, 9) != run_experiment(cfg, 10)


def test_single_client_round_is_local_training():
    cfg = SMALL.replace(n_clients=1, fraction=1.0, rounds=1)
    sim = Simulation(cfg, 2)
    start = [LayerParams(p.weights.copy(), p.biases.copy()) for p in sim.params]
    sim.step()
    expected, _ = local_train(sim.arch, start, sim.data.clients[0].train, cfg.epochs, cfg.batch_size, cfg.lr,
                              np.random.default_rng([2, 4, 1, 0]))
    assert as_bytes(sim.params) == as_bytes(expected)


def test_empty_shards_are_never_selected():
    ds = build_dataset(SMALL, 1)
    empty = Batch(np.zeros((0, SMALL.dim)), np.zeros(0, np.int64))
    clients = list(ds.clients)
    clients[2] = ClientData(empty, clients[2].test)
    ds = FederatedDataset(clients, ds.num_classes, ds.dim, ds.mode, ds.seed)
    sim = Simulation(SMALL.replace(fraction=1.0), 1, dataset=ds)
    assert 2 not in sim.step().clients


def test_dgc_state_resets_when_spec_changes():
    sim = Simulation(SMALL.replace(mode="fd", dgc=True, fraction=1.0), 3)
    sim.step()
    spec, state = sim.dgc_memory[0]
    assert sim._dgc_state_for(0, spec) is state
    other = SubModelSpec({0: tuple(i for i in range(8) if i not in spec.kept[0])[:6]}, 0.25)
    assert sim._dgc_state_for(0, other) is None


def test_trained_only_flag_runs():
    rows = run_experiment(SMALL.replace(mode="fd", aggregate="trained_only"), 1)
    assert len(rows) == SMALL.rounds + 1


def test_coverage_mask_matches_spec():
    arch = mlp(3, [4], 2)
    params = init_params(arch, np.random.default_rng(0))
    mask = coverage_mask(params, arch, SubModelSpec({0: (1, 3)}, 0.5))
    np.testing.assert_array_equal(mask[0].biases, [0, 1, 0, 1])
    np.testing.assert_array_equal(mask[1].weights, [[0, 1, 0, 1]] * 2)
