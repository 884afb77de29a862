import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cvxnet.network import ConvexNet, NetStack, NumericOverflowError, build
from cvxnet.training import (Adam, LossTrace, LRSchedule, NetTrainer, StackTrainer, TrainConfig,
                             TrainingAborted, fresh_sampler, pool_sampler, schedule_rate,
                             train_regression)


def test_schedule_examples():
    s = LRSchedule()
    assert schedule_rate(s, 1) == 1e-3
    assert schedule_rate(s, 101, 1e-3) == pytest.approx(9.5e-4)
    assert s.rates(5000)[-1] == 1e-5
    with pytest.raises(ValueError):
        schedule_rate(s, 0)


@settings(max_examples=100, deadline=None)
@given(st.floats(1e-4, 1e-1), st.floats(1e-7, 1e-4), st.floats(0.5, 0.999), st.integers(0, 50))
def test_schedule_monotone_and_floored(g0, floor, decay, warm):
    s = LRSchedule(g0, floor, decay, warm)
    r = s.rates(300)
    assert np.all(r >= floor)
    assert np.all(np.diff(r[warm:]) <= 0)


def test_adam_zero_gradient_is_noop():
    p = [np.array([1.0, -2.0])]
    opt = Adam(p)
    opt.step(p, [np.zeros(2)], 0.1)
    np.testing.assert_array_equal(p[0], [1.0, -2.0])


def test_adam_first_step_is_minus_rate():
    p = [np.array([0.0])]
    Adam(p).step(p, [np.array([1.0])], 0.01)
    # m_hat = v_hat = 1, so the move is rate / (1 + eps)
    assert p[0][0] == pytest.approx(-0.01 / (1 + 1e-8), rel=1e-12)


def test_adam_rejects_non_finite():
    p = [np.zeros(1)]
    with pytest.raises(NumericOverflowError):
        Adam(p).step(p, [np.array([np.inf])], 0.1)


def test_identical_updates_are_identical():
    a, b = build("2-SL2SE", 2, 4, c=3.0, rng=9), build("2-SL2SE", 2, 4, c=3.0, rng=9)
    x = np.random.default_rng(0).normal(size=(16, 2))
    y = x.sum(axis=1)
    ta, tb = NetTrainer(a), NetTrainer(b)
    for _ in range(5):
        ta.step(x, y, 1e-2)
        tb.step(x, y, 1e-2)
    assert a.to_bytes() == b.to_bytes()


def test_affine_target_is_learned_exactly():
    net = build("LM", 2, 1, rng=0)
    w, c = np.array([0.7, -0.3]), 0.25

    def draw(rng, size):
        x = rng.uniform(0, 1, size=(size, 2))
        return x, x @ w + c

    cfg = TrainConfig(64, 2000, LRSchedule(3e-2, 1e-7, 0.99, 500), seed=0)
    _, trace = train_regression(net, fresh_sampler(draw, 0), cfg)
    assert trace.loss[-1] < 1e-8


def test_zero_iterations_leaves_net():
    net = build("2-SLM", 1, 3, rng=0)
    before = net.to_bytes()
    _, trace = train_regression(net, pool_sampler(np.zeros((4, 1)), np.ones(4)), TrainConfig(2, 0))
    assert net.to_bytes() == before and len(trace) == 0


def test_training_is_deterministic():
    def run():
        net = build("2-SL2SE", 1, 8, c=10.0, rng=1)

        def draw(rng, size):
            x = rng.uniform(size=(size, 1))
            return x, (x[:, 0] - 0.4) ** 2 + 0.1 * rng.normal(size=size)

        train_regression(net, fresh_sampler(draw, 3), TrainConfig(32, 50, 1e-2, seed=3))
        return net.to_bytes()

    assert run() == run()


@pytest.mark.parametrize("arch", ["LM", "L2SE", "2-SLM", "2-SL2SE"])
def test_loss_falls_on_toy(arch):
    from cvxnet.cli import ToySpec
    toy = ToySpec()
    rng = np.random.default_rng(0)
    x = rng.uniform(-7, 7, 4096)
    g = toy.f(x) + 2.0 * rng.normal(size=x.size)
    net = build(arch, 1, 16, c=10.0, rng=0)
    sampler = pool_sampler(toy.scale(x)[:, None], (g - g.mean()) / g.std())
    _, trace = train_regression(net, sampler, TrainConfig(256, 200, 1e-2))
    assert np.mean(trace.loss[-10:]) < trace.loss[0]


def test_abort_keeps_trace():
    net = build("LM", 1, 2, rng=0)

    def sampler(i, b):
        y = np.zeros(b) if i < 4 else np.full(b, np.inf)
        return np.ones((b, 1)), y

    with pytest.raises(TrainingAborted) as err:
        train_regression(net, sampler, TrainConfig(4, 10, 1e-3))
    assert len(err.value.trace) == 3


def test_trace_csv(tmp_path):
    t = LossTrace()
    t.append(1, 0.5, 1e-3)
    t.append(2, 0.25, 1e-3)
    path = tmp_path / "loss.csv"
    t.write_csv(path)
    assert path.read_text().splitlines() == ["iter,loss,lr", "1,0.5,0.001", "2,0.25,0.001"]


def test_stack_trainer_matches_single_trainers():
    nets = [build("2-SL2SE", 1, 4, c=5.0, rng=i) for i in range(2)]
    copies = [n.copy() for n in nets]
    stack = NetStack(nets)
    st_tr = StackTrainer(stack)
    singles = [NetTrainer(n) for n in copies]
    rng = np.random.default_rng(0)
    x = rng.uniform(size=(20, 1))
    y = rng.normal(size=(2, 20))
    for _ in range(3):
        losses = st_tr.step(x, y, 1e-2)
        for g, tr in enumerate(singles):
            assert losses[g] == pytest.approx(tr.step(x, y[g], 1e-2), rel=1e-12)
    for g, net in enumerate(stack.unstack()):
        for a, b in zip(net.parameters(), copies[g].parameters()):
            np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-12)
        assert net.activation.lambda_tilde == pytest.approx(copies[g].activation.lambda_tilde, rel=1e-10)
