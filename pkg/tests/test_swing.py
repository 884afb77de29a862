import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cvxnet.market import GasForwardModel
from cvxnet.network import NetConfig, convexity_midpoint_check
from cvxnet.swing import (BENCHMARKS, InfeasibleSpecError, SwingSpec, SwingTrainConfig, _endpoint_values,
                          admissible_interval, evaluate_swing, reference_gas_model, reference_swing_spec,
                          reachable_volumes, train_swing, unconstrained_value, volume_transform,
                          write_report)
from cvxnet.training import LRSchedule

M = reference_gas_model()
NET = NetConfig("2-SL2SE", 16, 20.0)


def small_cfg(mode="shared", seed=0):
    return SwingTrainConfig(1024, 2, 200, 100, LRSchedule(1e-2, 1e-4, 0.99, 50), seed, mode)


def test_volume_transform_examples():
    assert volume_transform(SwingSpec(31, 20.0, 0, 1, 20, 30), 25) == 0.5
    assert volume_transform(SwingSpec(31, 20.0, 0, 1, 20, 30), 20) == 0.0
    assert volume_transform(SwingSpec(31, 20.0, 0, 1, 20, 20), 20) == 0.0


def test_admissible_interval_examples():
    spec = reference_swing_spec(20, 25)
    assert admissible_interval(spec, 30, 19) == (1, 1)
    assert admissible_interval(spec, 0, 0) == (0, 1)
    assert admissible_interval(spec, 30, 25) == (0, 0)
    with pytest.raises(InfeasibleSpecError):
        admissible_interval(spec, 30, 18)


def test_spec_validation():
    with pytest.raises(InfeasibleSpecError):
        SwingSpec(5, 20.0, 0, 1, 6, 7)
    with pytest.raises(InfeasibleSpecError):
        SwingSpec(5, 20.0, 2, 1, 0, 5)
    with pytest.raises(InfeasibleSpecError):
        SwingSpec(5, 20.0, 0, 1, 0, 0)
    with pytest.raises(ValueError):
        SwingSpec(5, 20.0, 0, 1.5, 0, 5)


def test_reachable_small_examples():
    v = reachable_volumes(SwingSpec(2, 20.0, 0, 1, 0, 2))
    assert [lv.tolist() for lv in v.levels] == [[0], [0, 1], [0, 1, 2]]
    v = reachable_volumes(SwingSpec(2, 20.0, 0, 1, 2, 2))
    assert [lv.tolist() for lv in v.levels] == [[0], [1], [2]]


def test_reachable_reference_band():
    v = reachable_volumes(reference_swing_spec(20, 25))
    sizes = [lv.size for lv in v.levels]
    assert sizes[:12] == list(range(1, 13))
    assert v.levels[31].tolist() == list(range(20, 26))
    assert max(sizes) < 31 and sizes[-1] == 6
    for k, lv in enumerate(v.levels):
        assert lv.min() >= max(0, 20 - (31 - k)) and lv.max() <= min(k, 25)


def _brute_force_levels(spec):
    """Prefix sums of all 0/1 sequences whose total lands in the band."""
    levels = [set() for _ in range(spec.N + 1)]
    for seq in itertools.product((0, 1), repeat=spec.N):
        if spec.Q_lo <= sum(seq) <= spec.Q_hi:
            for k, q in enumerate(np.concatenate([[0], np.cumsum(seq)])):
                levels[k].add(int(q))
    return [sorted(s) for s in levels]


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 10).flatmap(lambda n: st.tuples(st.just(n), st.integers(0, n), st.integers(0, n))))
def test_reachable_matches_enumeration(args):
    N, a, b = args
    lo, hi = min(a, b), max(a, b)
    if hi == 0:
        return
    spec = SwingSpec(N, 20.0, 0, 1, lo, hi)
    got = [lv.tolist() for lv in reachable_volumes(spec).levels]
    assert got == _brute_force_levels(spec)


def test_reachable_wide_local_bounds_by_tree():
    # endpoint strategies enumerated path by path, independent of the set recursion
    spec = SwingSpec(5, 20.0, 0, 2, 3, 6)
    levels = [set() for _ in range(spec.N + 1)]

    def walk(k, Q):
        levels[k].add(Q)
        if k == spec.N:
            return
        lo, hi = admissible_interval(spec, k, Q)
        for q in {int(lo), int(hi)}:
            walk(k + 1, Q + q)

    walk(0, 0)
    assert [lv.tolist() for lv in reachable_volumes(spec).levels] == [sorted(s) for s in levels]
    assert all(spec.Q_lo <= Q <= spec.Q_hi for Q in levels[-1])


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 30), st.floats(1, 40), st.floats(-5, 5), st.floats(-5, 5), st.integers(0, 25))
def test_bang_bang_endpoints(k, F, slope, icpt, Q):
    spec = SwingSpec(31, 20.0, 0, 3, 10, 40)
    try:
        lo, hi = admissible_interval(spec, k, Q)
    except InfeasibleSpecError:
        return
    cont = lambda Qn: slope * np.asarray(Qn, dtype=float) + icpt
    best, q = _endpoint_values(spec, k, np.array([Q]), np.array([F]), cont)
    for qi in range(int(lo), int(hi) + 1):
        assert qi * (F - spec.K) + cont(Q + qi) <= best[0] + 1e-9
    assert q[0] in (lo, hi)


def test_unconstrained_oracle():
    spec = SwingSpec(8, 20.0, 0, 1, 0, 8)
    nets = train_swing(M, spec, NET, small_cfg())
    price, se = evaluate_swing(nets, M, spec, 200_000, seed=1)
    assert abs(price - unconstrained_value(M, spec)) < 3 * se


def test_forced_strategy_is_martingale():
    spec = SwingSpec(10, 20.0, 0, 1, 10, 10)
    nets = train_swing(M, spec, NET, small_cfg())
    price, se = evaluate_swing(nets, M, spec, 200_000, seed=2)
    assert abs(price) < 3 * se


def test_zero_vol_is_worthless():
    m = GasForwardModel(4.0, 1e-12, 20.0)
    spec = SwingSpec(6, 20.0, 0, 1, 2, 4)
    nets = train_swing(m, spec, NET, small_cfg())
    price, _ = evaluate_swing(nets, m, spec, 10_000, seed=0)
    assert abs(price) < 1e-9


@pytest.fixture(scope="module", params=["shared", "per_volume"])
def band_nets(request):
    spec = SwingSpec(10, 20.0, 0, 1, 4, 7)
    return spec, train_swing(M, spec, NET, small_cfg(request.param))


def test_continuations_convex_per_volume(band_nets):
    spec, nets = band_nets
    for k in (1, 5, spec.N - 2):
        cont = nets.continuations[k]
        for j in range(cont.volumes.size):
            f = cont.for_volume(j)
            ok, worst = convexity_midpoint_check(lambda x: f(x[:, 0]), 2000, ([cont.lo], [cont.hi]), 1e-9)
            assert ok, (k, j, worst)


def test_values_at_matches_values(band_nets):
    _, nets = band_nets
    cont = nets.continuations[3]
    x = np.linspace(cont.lo, cont.hi, 50)
    cols = np.arange(50) % cont.volumes.size
    np.testing.assert_allclose(cont.values_at(x, cols), cont.values(x)[np.arange(50), cols], rtol=1e-12)


def test_strategy_respects_constraints(band_nets):
    from cvxnet.market import simulate_gas_factor
    spec, nets = band_nets
    x = simulate_gas_factor(M, spec.grid, 5000, seed=3)
    Q = np.zeros(5000, dtype=np.int64)
    for k in range(spec.N):
        F = M.spot(x[:, k], spec.grid.times[k])
        _, q = _endpoint_values(spec, k, Q, F, lambda Qn: nets.continuation_at(k, x[:, k], Qn))
        assert np.all((q >= spec.q_lo) & (q <= spec.q_hi))
        Q = Q + q
    assert np.all((Q >= spec.Q_lo) & (Q <= spec.Q_hi))
    evaluate_swing(nets, M, spec, 5000, seed=3)


def test_training_deterministic():
    spec = SwingSpec(6, 20.0, 0, 1, 2, 4)
    a = train_swing(M, spec, NET, small_cfg("per_volume", 5))
    b = train_swing(M, spec, NET, small_cfg("per_volume", 5))
    assert a.value == b.value
    assert evaluate_swing(a, M, spec, 10_000, 1) == evaluate_swing(b, M, spec, 10_000, 1)


def test_report(tmp_path):
    path = tmp_path / "s.csv"
    write_report(path, [{"Q_lo": 20, "Q_hi": 25, "price": 8.3, "std_error": 0.04}])
    assert path.read_text().splitlines() == ["Q_lo,Q_hi,price,std_error,benchmark",
                                             "20,25,8.300000,0.040000,8.36"]
    assert BENCHMARKS[(20, 22)] == 4.50
