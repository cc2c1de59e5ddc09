import math

import numpy as np
import pytest

from fedprp.data import LabeledDataset
from fedprp.errors import ConfigError, InputError, MissingPrototypeError
from fedprp.model import SharedParams, embed, init_shared
from fedprp.numerics import finite_diff_check, kl_divergence, softmax
from fedprp.prototypes import (
    EmpiricalPrototypes,
    GlobalPrototypes,
    Margins,
    ema_update,
    empirical_prototypes,
    inter_class_discrimination_loss,
    intra_class_consistency_loss,
)


def identity_mu(dim):
    return SharedParams(((np.eye(dim), np.zeros(dim)),))


def loop_id_loss(Z, y, protos, eps, eps_p, distance="kl"):
    """Straight-line evaluation of the margin contrastive loss, one pair at a time."""
    def d(c, z):
        if distance == "kl":
            return kl_divergence(softmax(c), softmax(z))
        return sum((a - b) ** 2 for a, b in zip(c, z))

    total = 0.0
    for i in range(len(y)):
        c = protos[int(y[i])]
        num = math.exp(-d(c, Z[i]) - eps)
        den = 0.0
        for j in range(len(y)):
            den += math.exp(-d(c, Z[j]) - (eps if j == i else eps_p))
        total += -math.log(num / den)
    return total


def loop_ic_loss(Z, y, protos, n):
    total = 0.0
    for i in range(len(y)):
        c = protos[int(y[i])]
        total += sum((a - b) ** 2 for a, b in zip(Z[i], c))
    return total / n


def random_instance(rng, max_batch=8, max_dim=16, n_cls=4, scale=1.0):
    B = int(rng.integers(1, max_batch + 1))
    D = int(rng.integers(2, max_dim + 1))
    y = rng.integers(0, n_cls, size=B)
    Z = rng.normal(size=(B, D)) * scale
    protos = {c: rng.normal(size=D) * scale for c in range(n_cls)}
    return Z, y, protos


# ----------------------------------------------------------------------------
# empirical prototypes


def test_empirical_one_sample_per_class():
    X = np.array([[1.0, 2.0], [3.0, 0.5]])
    ep = empirical_prototypes(identity_mu(2), LabeledDataset(X, [0, 1], 3))
    np.testing.assert_array_equal(ep.protos[0], X[0])
    np.testing.assert_array_equal(ep.protos[1], X[1])
    assert 2 not in ep.protos
    assert ep.counts == {0: 1, 1: 1}


def test_empirical_mean():
    X = np.array([[1.0, 1.0], [3.0, 3.0]])
    ep = empirical_prototypes(identity_mu(2), LabeledDataset(X, [1, 1], 2))
    np.testing.assert_array_equal(ep.protos[1], [2.0, 2.0])


def test_empirical_matches_naive_accumulation():
    rng = np.random.default_rng(0)
    mu = init_shared(5, (7,), 6, seed=1)
    X = rng.normal(size=(40, 5))
    y = rng.integers(0, 4, size=40)
    ep = empirical_prototypes(mu, LabeledDataset(X, y, 5))
    for c in range(5):
        acc, n = np.zeros(6), 0
        for i in range(40):
            if y[i] == c:
                acc += embed(mu, X[i])
                n += 1
        if n:
            np.testing.assert_allclose(ep.protos[c], acc / n, rtol=0, atol=1e-12)
        else:
            assert c not in ep.protos


def test_empirical_empty():
    with pytest.raises(InputError):
        empirical_prototypes(identity_mu(2), LabeledDataset(np.zeros((0, 2)), [], 2))


# ----------------------------------------------------------------------------
# moving average


def emp(protos, cid=0):
    return EmpiricalPrototypes({c: np.asarray(v, float) for c, v in protos.items()}, {}, cid)


def test_ema_midpoint():
    g = GlobalPrototypes({0: np.array([1.0, 0.0])})
    out = ema_update(g, [emp({0: [0.0, 1.0]})], 0.5)
    np.testing.assert_array_equal(out.protos[0], [0.5, 0.5])
    np.testing.assert_array_equal(g.protos[0], [1.0, 0.0])


def test_ema_beta_one_freezes():
    g = GlobalPrototypes({0: np.array([1.0, 2.0]), 1: np.array([3.0, 4.0])})
    out = ema_update(g, [emp({0: [9.0, 9.0], 1: [-1.0, 5.0]})], 1.0)
    for c in (0, 1):
        np.testing.assert_array_equal(out.protos[c], g.protos[c])


def test_ema_beta_zero_takes_round_mean():
    g = GlobalPrototypes({0: np.array([1.0, 2.0])})
    out = ema_update(g, [emp({0: [2.0, 0.0]}, 0), emp({0: [4.0, 2.0]}, 1)], 0.0)
    np.testing.assert_array_equal(out.protos[0], [3.0, 1.0])


def test_ema_new_class_ignores_beta():
    out = ema_update(GlobalPrototypes(), [emp({3: [2.0, 2.0]})], 0.9)
    np.testing.assert_array_equal(out.protos[3], [2.0, 2.0])


def test_ema_mean_only_over_owners():
    g = GlobalPrototypes({0: np.zeros(2), 1: np.ones(2)})
    out = ema_update(g, [emp({0: [2.0, 2.0]}, 0), emp({1: [3.0, 3.0]}, 1)], 0.5)
    np.testing.assert_array_equal(out.protos[0], [1.0, 1.0])
    np.testing.assert_array_equal(out.protos[1], [2.0, 2.0])


def test_ema_untouched_classes_unchanged():
    g = GlobalPrototypes({0: np.array([5.0, 5.0]), 1: np.array([1.0, 1.0])})
    out = ema_update(g, [emp({1: [3.0, 3.0]})], 0.5)
    np.testing.assert_array_equal(out.protos[0], [5.0, 5.0])


def test_ema_report_order_irrelevant():
    rng = np.random.default_rng(2)
    reports = [emp({c: rng.normal(size=3) for c in range(3)}, k) for k in range(5)]
    g = GlobalPrototypes({0: rng.normal(size=3)})
    a = ema_update(g, reports, 0.3)
    b = ema_update(g, reports[::-1], 0.3)
    for c in range(3):
        assert a.protos[c].tobytes() == b.protos[c].tobytes()


def test_ema_beta_range():
    with pytest.raises(ConfigError):
        ema_update(GlobalPrototypes(), [], 1.5)


def test_ema_convexity_random():
    rng = np.random.default_rng(3)
    for _ in range(1000):
        dim = int(rng.integers(1, 6))
        old = rng.normal(size=dim)
        beta = float(rng.uniform())
        reports = [emp({0: rng.normal(size=dim)}, k) for k in range(int(rng.integers(1, 4)))]
        mean = np.mean([r.protos[0] for r in reports], axis=0)
        new = ema_update(GlobalPrototypes({0: old}), reports, beta).protos[0]
        lo, hi = np.minimum(old, mean), np.maximum(old, mean)
        assert np.all(new >= lo - 1e-12) and np.all(new <= hi + 1e-12)


# ----------------------------------------------------------------------------
# inter-class discrimination loss


def test_id_single_sample_zero():
    r = inter_class_discrimination_loss(
        np.array([[0.3, -1.0]]), np.array([0]), emp({0: [1.0, 2.0]}), Margins(0.7, 0.0)
    )
    assert r.loss == pytest.approx(0.0, abs=1e-15)


@pytest.mark.parametrize("distance", ["kl", "euclid"])
def test_id_symmetric_pair(distance):
    protos = emp({0: [1.0, 0.0], 1: [0.0, 1.0]})
    Z = np.array([[0.0, 0.0], [1.0, 1.0]])
    r = inter_class_discrimination_loss(Z, np.array([0, 1]), protos, Margins(0.3, 0.3), distance)
    assert r.loss == pytest.approx(2 * math.log(2), abs=1e-12)


@pytest.mark.parametrize("distance", ["kl", "euclid"])
def test_id_matches_loop_oracle(distance):
    rng = np.random.default_rng(4)
    for _ in range(100):
        Z, y, protos = random_instance(rng)
        eps, eps_p = rng.uniform(0, 2, size=2)
        r = inter_class_discrimination_loss(Z, y, emp(protos), Margins(eps, eps_p), distance)
        assert r.loss == pytest.approx(loop_id_loss(Z, y, protos, eps, eps_p, distance), abs=1e-10)


@pytest.mark.parametrize("distance", ["kl", "euclid"])
def test_id_gradients(distance):
    rng = np.random.default_rng(5)
    for _ in range(50):
        Z, y, protos = random_instance(rng, scale=0.5 if distance == "euclid" else 1.0)
        m = Margins(*rng.uniform(0, 2, size=2))

        def f(flat):
            r = inter_class_discrimination_loss(flat.reshape(Z.shape), y, emp(protos), m, distance)
            return r.loss, r.grad_z

        assert finite_diff_check(f, Z, 1e-5) < 1e-3

        def f_eps(e):
            r = inter_class_discrimination_loss(Z, y, emp(protos), Margins(e[0], e[1]), distance)
            return r.loss, np.array([r.grad_epsilon, r.grad_epsilon_prime])

        assert finite_diff_check(f_eps, [m.epsilon, m.epsilon_prime], 1e-5) < 1e-3


def test_id_margin_shift_invariance():
    rng = np.random.default_rng(6)
    for _ in range(20):
        Z, y, protos = random_instance(rng)
        a = inter_class_discrimination_loss(Z, y, emp(protos), Margins(0.2, 0.1))
        b = inter_class_discrimination_loss(Z, y, emp(protos), Margins(1.7, 1.6))
        assert a.loss == pytest.approx(b.loss, abs=1e-10)


def test_id_mean_reduction():
    rng = np.random.default_rng(7)
    Z, y, protos = random_instance(rng)
    s = inter_class_discrimination_loss(Z, y, emp(protos), Margins(), reduction="sum")
    m = inter_class_discrimination_loss(Z, y, emp(protos), Margins(), reduction="mean")
    assert m.loss == pytest.approx(s.loss / len(y))
    np.testing.assert_allclose(m.grad_z, s.grad_z / len(y))


def test_id_missing_prototype():
    with pytest.raises(MissingPrototypeError):
        inter_class_discrimination_loss(np.zeros((1, 2)), np.array([4]), emp({0: [0, 0]}), Margins())


# ----------------------------------------------------------------------------
# intra-class consistency loss


def test_ic_zero_at_prototypes():
    g = GlobalPrototypes({0: np.array([1.0, 2.0]), 1: np.array([-1.0, 0.0])})
    Z = np.array([[1.0, 2.0], [-1.0, 0.0], [1.0, 2.0]])
    loss, grad = intra_class_consistency_loss(Z, [0, 1, 0], g, 3)
    assert loss == 0.0
    assert not grad.any()


def test_ic_single_sample():
    loss, _ = intra_class_consistency_loss(
        np.array([[1.0, 0.0]]), [0], GlobalPrototypes({0: np.array([0.0, 1.0])}), 1
    )
    assert loss == 2.0


def test_ic_matches_loop_oracle_and_gradient():
    rng = np.random.default_rng(8)
    for _ in range(100):
        Z, y, protos = random_instance(rng)
        n = int(rng.integers(len(y), 3 * len(y) + 1))
        g = GlobalPrototypes(protos)
        loss, grad = intra_class_consistency_loss(Z, y, g, n)
        assert loss == pytest.approx(loop_ic_loss(Z, y, protos, n), abs=1e-10)
        assert loss >= 0

        def f(flat):
            return intra_class_consistency_loss(flat.reshape(Z.shape), y, g, n)

        assert finite_diff_check(f, Z, 1e-5) < 1e-3


def test_ic_translation_invariance():
    rng = np.random.default_rng(9)
    Z, y, protos = random_instance(rng)
    shift = rng.normal(size=Z.shape[1])
    a, _ = intra_class_consistency_loss(Z, y, GlobalPrototypes(protos), 5)
    b, _ = intra_class_consistency_loss(
        Z + shift, y, GlobalPrototypes({c: v + shift for c, v in protos.items()}), 5
    )
    assert a == pytest.approx(b, abs=1e-10)


def test_ic_missing_prototype():
    with pytest.raises(MissingPrototypeError):
        intra_class_consistency_loss(np.zeros((1, 2)), [1], GlobalPrototypes({0: np.zeros(2)}), 1)
