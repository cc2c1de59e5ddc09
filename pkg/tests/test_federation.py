import dataclasses
import inspect
from collections import Counter

import numpy as np
import pytest

from fedprp import federation
from fedprp.data import LabeledDataset, class_groups, gen_blobs, partition_sharding, split_holdout
from fedprp.errors import ConfigError, InputError, LoadError, ProtocolError, RoundError
from fedprp.federation import (
    Client,
    ClientReport,
    FederationConfig,
    aggregate_shared,
    init_new_client,
    init_state,
    load_checkpoint,
    local_update,
    run_baseline,
    run_round,
    run_rounds,
    save_checkpoint,
    select_clients,
)
from fedprp.model import SharedParams, embed, forward
from fedprp.numerics import softmax
from fedprp.prototypes import EmpiricalPrototypes, GlobalPrototypes, Margins
from fedprp.training import LocalSchedule, LossParts, total_loss, update_joint


@pytest.fixture(scope="module")
def world():
    ds = gen_blobs(4, 8, 50, 1.0, seed=0)
    train, test = split_holdout(ds, 10, seed=0)
    parts = partition_sharding(train, 4, 2, seed=0)
    clients = {k: Client(k, p, test.subset(np.flatnonzero(np.isin(test.y, p.present_classes))))
               for k, p in enumerate(parts)}
    return clients, test, class_groups(train.class_counts)


def small_config(**kw):
    base = dict(num_clients=4, clients_per_round=2, rounds=3, hidden=(16,), embedding_dim=8,
                schedule=LocalSchedule(t_shared=2, s_personal=1, lr=0.01, batch_size=16))
    base.update(kw)
    return FederationConfig(**base)


def report(cid, arrays, n=1):
    mu = SharedParams.from_arrays(arrays)
    return ClientReport(cid, mu, EmpiricalPrototypes({}, {}, cid), LossParts(), n)


def test_config_validation():
    with pytest.raises(ConfigError):
        FederationConfig(num_clients=3, clients_per_round=4)
    with pytest.raises(ConfigError):
        FederationConfig(beta=1.2)
    with pytest.raises(ConfigError):
        FederationConfig(algorithm="fedrep")


def test_select_all_and_deterministic():
    assert select_clients(range(5), 5, 0, 1) == [0, 1, 2, 3, 4]
    assert select_clients(range(20), 8, 3, 7) == select_clients(range(20), 8, 3, 7)
    assert select_clients(range(20), 8, 3, 7) != select_clients(range(20), 8, 3, 8)


def test_select_uniform_monte_carlo():
    counts = Counter()
    for r in range(1000):
        picked = select_clients(range(100), 10, 0, r)
        assert len(set(picked)) == 10
        counts.update(picked)
    assert all(60 <= counts[k] <= 140 for k in range(100))


def test_aggregate_examples():
    a = [np.array([[2.0]]), np.array([1.0])]
    b = [np.array([[4.0]]), np.array([3.0])]
    single = aggregate_shared([report(0, a)])
    assert single.digest() == SharedParams.from_arrays(a).digest()
    mean = aggregate_shared([report(0, a), report(1, b)])
    assert mean.layers[0][0][0, 0] == 3.0 and mean.layers[0][1][0] == 2.0


def test_aggregate_permutation_and_idempotence():
    rng = np.random.default_rng(0)
    reports = [report(k, [rng.normal(size=(3, 2)), rng.normal(size=3)]) for k in range(6)]
    ref = aggregate_shared(reports).digest()
    for _ in range(5):
        assert aggregate_shared(list(rng.permutation(reports))).digest() == ref
    same = [report(k, reports[0].mu.arrays()) for k in range(7)]
    assert aggregate_shared(same).digest() == reports[0].mu.digest()


def test_aggregate_weighted_and_mismatch():
    a = report(0, [np.array([[0.0]]), np.array([0.0])], n=1)
    b = report(1, [np.array([[4.0]]), np.array([0.0])], n=3)
    assert aggregate_shared([a, b], weighted=True).layers[0][0][0, 0] == 3.0
    c = report(2, [np.zeros((2, 1)), np.zeros(2)])
    with pytest.raises(ProtocolError):
        aggregate_shared([a, c])
    with pytest.raises(ProtocolError):
        aggregate_shared([])


def test_privacy_boundary(world):
    fields = {f.name for f in dataclasses.fields(ClientReport)}
    assert fields == {"client_id", "mu", "prototypes", "losses", "n_samples", "public_head"}
    clients, _, _ = world
    cfg = small_config()
    state = init_state(cfg, 8, 4)
    rep, _ = local_update(clients[0], state.clients[0], state.global_mu, state.global_protos, cfg, 1)
    assert rep.public_head is None
    arrays = [*rep.mu.arrays(), *rep.prototypes.protos.values()]
    for a in arrays:
        assert a.shape[-1] != 8 or a.ndim != 2 or a.shape[0] != len(clients[0].train)
    # source-level check: the FedPRP branch never hands the head or the samples to a report
    src = inspect.getsource(federation.local_update)
    fedprp_branch = src.split("nu = update_personal", 1)[1]
    assert "ClientReport(client.client_id, mu, protos, losses, len(data))" in fedprp_branch


def test_local_update_zero_epochs_echoes_global(world):
    clients, _, _ = world
    cfg = small_config(schedule=LocalSchedule(t_shared=0, s_personal=0))
    state = init_state(cfg, 8, 4)
    rep, slot = local_update(clients[1], state.clients[1], state.global_mu, state.global_protos, cfg, 1)
    assert rep.mu.digest() == state.global_mu.digest()
    Z = embed(state.global_mu, clients[1].train.X)
    for c, v in rep.prototypes.protos.items():
        np.testing.assert_allclose(v, Z[clients[1].train.y == c].mean(axis=0), atol=1e-12)


def test_lambda_zero_never_computes_id(world):
    clients, _, _ = world
    cfg = small_config(lam=0.0)
    state = init_state(cfg, 8, 4)
    rep, _ = local_update(clients[0], state.clients[0], state.global_mu, state.global_protos, cfg, 1)
    assert rep.losses.computed == {"ce", "ic"}
    _, rec = run_round(state, clients, cfg, world[1], world[2])
    assert rec.loss_id is None and rec.loss_ic is not None


def test_local_update_lowers_total_loss(world):
    clients, _, _ = world
    cfg = small_config(schedule=LocalSchedule(t_shared=10, s_personal=5, lr=0.01, batch_size=16))
    state = init_state(cfg, 8, 4)
    data = clients[2].train
    rep, slot = local_update(clients[2], state.clients[2], state.global_mu, GlobalPrototypes(), cfg, 1)

    def loss(mu):
        Z = embed(mu, data.X)
        emp = EmpiricalPrototypes({c: Z[data.y == c].mean(0) for c in data.present_classes}, {})
        glob = GlobalPrototypes({c: v.copy() for c, v in emp.protos.items()})
        return total_loss(mu, slot.nu, data.X, data.y, emp, glob, cfg.lam, Margins(), n_samples=len(data)).loss

    assert loss(rep.mu) < loss(state.global_mu)


def test_zero_rounds_is_noop(world):
    clients, test, groups = world
    cfg = small_config()
    state = init_state(cfg, 8, 4)
    out, recs = run_rounds(state, clients, cfg, test, groups, 0)
    assert recs == [] and out is state


def test_beta_one_freezes_prototypes(world):
    clients, test, groups = world
    cfg = small_config(beta=1.0, clients_per_round=4)
    state, _ = run_round(init_state(cfg, 8, 4), clients, cfg, test, groups)
    frozen = {c: v.copy() for c, v in state.global_protos.protos.items()}
    for _ in range(2):
        state, _ = run_round(state, clients, cfg, test, groups)
    for c, v in frozen.items():
        assert state.global_protos.protos[c].tobytes() == v.tobytes()


def test_runs_are_reproducible(world):
    clients, test, groups = world
    cfg = small_config()
    a = run_rounds(init_state(cfg, 8, 4), clients, cfg, test, groups, 3)[1]
    b = run_rounds(init_state(cfg, 8, 4), clients, cfg, test, groups, 3)[1]
    assert [r.to_json() for r in a] == [r.to_json() for r in b]


def test_parallel_matches_sequential(world):
    clients, test, groups = world
    seq = small_config()
    par = small_config(workers=3)
    s1, r1 = run_rounds(init_state(seq, 8, 4), clients, seq, test, groups, 2)
    s2, r2 = run_rounds(init_state(par, 8, 4), clients, par, test, groups, 2)
    assert [r.to_json() for r in r1] == [r.to_json() for r in r2]
    assert s1.global_mu.digest() == s2.global_mu.digest()


def test_checkpoint_round_trip_continues_bitwise(world, tmp_path):
    clients, test, groups = world
    cfg = small_config()
    state, straight = run_rounds(init_state(cfg, 8, 4), clients, cfg, test, groups, 2)
    state1, first = run_rounds(init_state(cfg, 8, 4), clients, cfg, test, groups, 1)
    save_checkpoint(tmp_path / "c.bin", state1, {"note": "x"})
    loaded, meta = load_checkpoint(tmp_path / "c.bin")
    assert meta == {"note": "x"} and loaded.round == 1
    state2, second = run_rounds(loaded, clients, cfg, test, groups, 1)
    assert [r.to_json() for r in first + second] == [r.to_json() for r in straight]
    assert state2.global_mu.digest() == state.global_mu.digest()
    for cid in state.clients:
        assert state2.clients[cid].nu.digest() == state.clients[cid].nu.digest()


def test_checkpoint_version_mismatch(world, tmp_path):
    cfg = small_config()
    path = tmp_path / "c.bin"
    save_checkpoint(path, init_state(cfg, 8, 4))
    raw = bytearray(path.read_bytes())
    raw[8:12] = (99).to_bytes(4, "little")
    path.write_bytes(bytes(raw))
    with pytest.raises(LoadError, match="version"):
        load_checkpoint(path)


def test_fedavg_checkpoint_keeps_global_head(world, tmp_path):
    clients, test, groups = world
    cfg = small_config(algorithm="fedavg")
    state, _ = run_rounds(init_state(cfg, 8, 4), clients, cfg, test, groups, 1)
    save_checkpoint(tmp_path / "c.bin", state)
    loaded, _ = load_checkpoint(tmp_path / "c.bin")
    assert loaded.global_nu.digest() == state.global_nu.digest()


def test_empty_selection_raises(world):
    clients, test, groups = world
    empty = {k: Client(k, c.train.subset([]), c.test) for k, c in clients.items()}
    cfg = small_config()
    with pytest.raises(RoundError):
        run_round(init_state(cfg, 8, 4), empty, cfg, test, groups)


def test_fedavg_single_client_is_centralized_sgd(world):
    clients, test, groups = world
    one = {0: clients[0]}
    cfg = small_config(num_clients=1, clients_per_round=1, algorithm="fedavg")
    state0 = init_state(cfg, 8, 4)
    state1, _ = run_round(state0, one, cfg, test, groups)
    rng = np.random.default_rng([cfg.seed, 1, 0, 8])
    mu, nu, _ = update_joint(state0.global_mu, state0.global_nu, clients[0].train, 3, 0.01, 16, rng)
    assert state1.global_mu.digest() == mu.digest()
    assert state1.global_nu.digest() == nu.digest()


def test_baselines_require_baseline_algorithm(world):
    clients, test, groups = world
    with pytest.raises(ConfigError):
        run_baseline(small_config(), clients, test, groups)
    recs = run_baseline(small_config(algorithm="proto", rounds=2), clients, test, groups)
    assert len(recs) == 2 and all(r.loss_id is None and r.loss_ic is None for r in recs)


def test_new_client_contract(world):
    clients, test, groups = world
    cfg = small_config()
    fresh = init_state(cfg, 8, 4)
    newcomer = Client(10, clients[0].train, clients[0].test)
    with pytest.raises(InputError):
        init_new_client(fresh, newcomer, cfg)
    state, _ = run_round(fresh, clients, cfg, test, groups)
    with pytest.raises(InputError):
        init_new_client(state, Client(11, clients[0].train.subset([]), test), cfg)
    slot = init_new_client(state, newcomer, cfg)
    X = newcomer.train.X
    logits, z = forward(state.global_mu, slot.nu, X)
    np.testing.assert_array_equal(z, embed(state.global_mu, X))
    np.testing.assert_allclose(softmax(logits), 0.25)
    assert set(slot.protos.classes()) == set(newcomer.train.present_classes)
    with pytest.raises(InputError):
        init_new_client(state, newcomer, cfg)
    # the newcomer can now take part in a round
    state.clients[10] = slot
    _, rec = run_round(state, {10: newcomer}, cfg, test, groups, per_round=1)
    assert 0.0 <= rec.acc_loc <= 1.0


def test_record_json_round_trip():
    rec = federation.RunRecord(1, 0.5, 0.25, 1.0, 0.5, float("nan"), 0.0, 1.2, None, 0.3)
    line = rec.to_json()
    assert '"medium": null' in line
    back = federation.RunRecord.from_json(line)
    assert back.to_json() == line
    assert list(__import__("json").loads(line)) == list(federation.RECORD_FIELDS)


def test_empty_dataset_type_still_valid():
    ds = LabeledDataset(np.zeros((0, 3)), [], 2)
    assert len(ds) == 0 and ds.dim == 3
