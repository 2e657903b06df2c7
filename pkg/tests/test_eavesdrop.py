import numpy as np
import pytest

from ccmia.eavesdrop import TapConfig, cell_errors, estimation_error, latest_intercepted, tap
from ccmia.federated import RoundRecord
from ccmia.gnn import Gradients, init_params


def fake_records(T, K, seed=0, shape=(2, 2)):
    rng = np.random.default_rng(seed)
    W = init_params(shape[0], shape[1], 2, 0)

    def g():
        return Gradients(rng.normal(size=shape), rng.normal(size=shape[1]), rng.normal(size=(shape[1], 2)),
                         rng.normal(size=2))

    return [RoundRecord(t, tuple(g() for _ in range(K)), W, np.ones(K, dtype=bool)) for t in range(T)]


def test_certain_interception():
    recs = fake_records(5, 3)
    tr = tap(recs, TapConfig(gamma=1.0))
    assert tr.intercepted.all()
    assert all(tr.estimates[t][k] is recs[t].uploads[k] for t in range(5) for k in range(3))
    assert not estimation_error(tr, recs).any()


def test_no_interception_holds_zeros():
    recs = fake_records(4, 2)
    tr = tap(recs, TapConfig(gamma=0.0))
    assert not tr.intercepted.any()
    assert all(not est.flat().any() for row in tr.estimates for est in row)
    assert (tr.source_round == -1).all()
    assert latest_intercepted(tr, recs, 0) is None


def test_interception_rate_binomial():
    recs = fake_records(250, 4)
    tr = tap(recs, TapConfig(gamma=0.5, seed=11))
    n = tr.intercepted.size
    assert n == 1000
    assert abs(tr.intercepted.sum() - 500) < 3 * np.sqrt(n * 0.25)


def test_zero_order_hold_hand_case():
    recs = fake_records(2, 1)
    g_prev = recs[0].uploads[0]
    # find a seed that hits round 0 and misses round 1
    seed = next(s for s in range(1000)
                if list(tap(recs, TapConfig(gamma=0.5, seed=s)).intercepted[:, 0]) == [True, False])
    tr = tap(recs, TapConfig(gamma=0.5, seed=seed))
    assert tr.estimates[1][0] is g_prev and tr.source_round[1, 0] == 0
    g = recs[1].uploads[0]
    hand = sum(float(((a - b) ** 2).sum()) for a, b in zip(g.tensors().values(), g_prev.tensors().values()))
    assert estimation_error(tr, recs)[1] == pytest.approx(hand, rel=1e-14)
    assert estimation_error(tr, recs)[0] == 0.0
    snap, up = latest_intercepted(tr, recs, 0)
    assert up is g_prev and snap is recs[0].snapshot


def test_skip_marks_missing():
    recs = fake_records(30, 2)
    tr = tap(recs, TapConfig(gamma=0.5, seed=3, proxy_rule="skip"))
    errs = cell_errors(tr, recs)
    assert np.all(np.isnan(errs[~tr.intercepted]))
    assert np.all(errs[tr.intercepted] == 0)
    assert all((tr.estimates[t][k] is None) != tr.intercepted[t, k] for t in range(30) for k in range(2))


def test_error_shrinks_with_gamma():
    recs = fake_records(40, 3, seed=5)
    means = [np.mean([estimation_error(tap(recs, TapConfig(gamma=gm, seed=s)), recs).mean() for s in range(20)])
             for gm in (0.2, 0.5, 0.8)]
    assert means[0] >= means[1] >= means[2]


def test_determinism_and_validation():
    recs = fake_records(10, 3)
    a = tap(recs, TapConfig(gamma=0.3, seed=2))
    b = tap(recs, TapConfig(gamma=0.3, seed=2))
    assert np.array_equal(a.intercepted, b.intercepted)
    with pytest.raises(ValueError):
        TapConfig(gamma=1.5)
    with pytest.raises(ValueError):
        tap([], TapConfig())
