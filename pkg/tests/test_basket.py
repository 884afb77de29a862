import warnings

import numpy as np
import pytest
from scipy import integrate
from scipy.stats import norm

from cvxnet.basket import (BasketSpec, InputBox, cv_targets, geometric_basket_price, mc_cv_estimate,
                           mc_plain_estimate, reference_setup, sample_initial_prices,
                           train_price_surface, write_price_table)
from cvxnet.basket import test_point as basket_point
from cvxnet.market import BlackScholesModel, ModelError
from cvxnet.network import NetConfig, convexity_midpoint_check
from cvxnet.training import LRSchedule, TrainConfig


def bs_call(s, K, r, sigma, T):
    d1 = (np.log(s / K) + (r + 0.5 * sigma ** 2) * T) / (sigma * np.sqrt(T))
    return s * norm.cdf(d1) - K * np.exp(-r * T) * norm.cdf(d1 - sigma * np.sqrt(T))


def test_geometric_d1_is_black_scholes():
    m = BlackScholesModel(0.06, [0.2])
    spec = BasketSpec([1.0], 80.0, 0.5)
    assert geometric_basket_price(m, spec, [100.0]) == pytest.approx(bs_call(100.0, 80.0, 0.06, 0.2, 0.5), rel=1e-13)


def test_geometric_small_strike_limit():
    m = BlackScholesModel(0.06, [0.2, 0.3])
    spec = BasketSpec([0.5, 0.5], 1e-12, 1.0)
    s0 = np.array([100.0, 90.0])
    a = 0.5 * np.log(s0).sum() + 0.5 * (2 * 0.06 - 0.5 * (0.04 + 0.09))
    var = 0.25 * (0.04 + 0.09)
    assert geometric_basket_price(m, spec, s0) == pytest.approx(np.exp(-0.06) * np.exp(a + 0.5 * var), rel=1e-10)


def test_geometric_matches_2d_quadrature():
    m = BlackScholesModel(0.06, [0.21, 0.3])
    spec = BasketSpec([0.4, 0.6], 95.0, 0.5)
    s0 = np.array([100.0, 92.0])
    T, sig = spec.T, m.sigma
    mu = np.log(s0) + (m.r - 0.5 * sig ** 2) * T

    def inner(z1):
        # integrate over z2 from the kink onwards, where the payoff is positive
        base = spec.alpha[0] * (mu[0] + sig[0] * np.sqrt(T) * z1) + spec.alpha[1] * mu[1]
        c = spec.alpha[1] * sig[1] * np.sqrt(T)
        z_star = (np.log(spec.K) - base) / c
        f = lambda z2: (np.exp(base + c * z2) - spec.K) * norm.pdf(z2)
        return integrate.quad(f, max(z_star, -12.0), 12.0, epsabs=1e-13, epsrel=1e-13, limit=200)[0]

    val, _ = integrate.quad(lambda z1: inner(z1) * norm.pdf(z1), -12.0, 12.0, epsabs=1e-12, epsrel=1e-12,
                            limit=200)
    expected = np.exp(-m.r * T) * val
    assert geometric_basket_price(m, spec, s0) == pytest.approx(expected, rel=1e-6)


def test_cv_degenerate_basket_has_zero_variance():
    m = BlackScholesModel(0.06, [0.2])
    spec = BasketSpec([1.0], 80.0, 0.5)
    price, se = mc_cv_estimate(m, spec, [100.0], 1000, seed=0)
    assert se == 0.0
    assert price == pytest.approx(float(geometric_basket_price(m, spec, [100.0])), rel=1e-14)


def test_cv_beats_plain_mc():
    m, spec, _ = reference_setup(5, 0.2)
    s0 = basket_point(5, 3)
    _, se_cv = mc_cv_estimate(m, spec, s0, 50_000, seed=1)
    _, se_plain = mc_plain_estimate(m, spec, s0, 50_000, seed=1)
    assert se_cv < se_plain


def test_cv_stable_across_seeds():
    m, spec, _ = reference_setup(2, 0.0)
    s0 = basket_point(2, 2)
    a, sa = mc_cv_estimate(m, spec, s0, 200_000, seed=1)
    b, sb = mc_cv_estimate(m, spec, s0, 200_000, seed=2)
    assert abs(a - b) < 4 * np.hypot(sa, sb)


def test_cv_chunking_is_invisible():
    m, spec, _ = reference_setup(2, 0.3)
    s0 = basket_point(2, 4)
    assert mc_cv_estimate(m, spec, s0, 10_000, 3, chunk=1 << 18) == pytest.approx(
        mc_cv_estimate(m, spec, s0, 10_000, 3, chunk=777), rel=1e-12)


def test_cv_targets_batch_and_single_agree():
    m, spec, box = reference_setup(2, 0.0)
    s = sample_initial_prices(box, 3, seed=0)
    t = cv_targets(m, spec, s, 500, seed=0, first_stream=10)
    assert t[1] == pytest.approx(mc_cv_estimate(m, spec, s[1], 500, 0, stream=11)[0], rel=1e-12)


def test_basket_rejects_dividends():
    m = BlackScholesModel(0.06, [0.2], delta=0.01)
    with pytest.raises(ModelError):
        geometric_basket_price(m, BasketSpec([1.0], 80.0, 0.5), [100.0])


def test_input_sampling():
    box = InputBox([99.0, 98.0], 20.0)
    s = sample_initial_prices(box, 100_000, seed=0)
    assert np.all(box.contains(s))
    se = s.std(axis=0) / np.sqrt(len(s))
    assert np.all(np.abs(s.mean(axis=0) - box.x0) < 3 * se)
    flat = sample_initial_prices(InputBox([50.0], 0.0), 10, seed=0)
    assert np.all(flat == 50.0)


def test_spec_validation():
    with pytest.raises(ValueError):
        BasketSpec([0.5, 0.6], 80.0, 0.5)
    with pytest.raises(ValueError):
        BasketSpec([1.0], 0.0, 0.5)
    with pytest.raises(ValueError):
        InputBox([10.0], 20.0)


def test_test_points():
    np.testing.assert_array_equal(basket_point(2, 1), [90.0, 89.0])


@pytest.fixture(scope="module")
def small_surface():
    m, spec, box = reference_setup(2, 0.0)
    cfg = TrainConfig(64, 600, LRSchedule(1e-2, 1e-5, 0.95, 500), seed=0)
    return train_price_surface(m, spec, box, NetConfig("2-SL2SE", 16, 20.0), 512, cfg, pool_size=4096)


def test_surface_is_convex(small_surface):
    box = small_surface.box
    ok, worst = convexity_midpoint_check(small_surface.net, 10_000, (box.lo, box.hi), 1e-9)
    assert ok, worst


def test_surface_monotone(small_surface):
    box = small_surface.box
    s = sample_initial_prices(box, 100, seed=5, stream=3)
    s = np.minimum(s, box.hi - 5.0)
    up = small_surface.net(s + 5.0) - small_surface.net(s)
    assert np.all(up >= -1e-2)


def test_surface_warns_outside_box(small_surface):
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        small_surface([200.0, 200.0])
    assert caught


def test_zero_vol_surface_matches_payoff():
    m = BlackScholesModel(0.06, [1e-9, 1e-9])
    _, spec, box = reference_setup(2, 0.0)
    cfg = TrainConfig(64, 800, LRSchedule(1e-2, 1e-6, 0.98, 500), seed=0)
    # plain LM tends to strand planes in a corner; the two-layer max net does not
    surf = train_price_surface(m, spec, box, NetConfig("2-SLM", 16, 20.0), 4, cfg, pool_size=4096)
    s = sample_initial_prices(box, 1000, seed=9, stream=5)
    exact = np.exp(-m.r * spec.T) * np.maximum(s @ spec.alpha * np.exp(m.r * spec.T) - spec.K, 0.0)
    assert np.abs(surf.net(s) - exact).max() < 1e-2


def test_price_table(tmp_path):
    path = tmp_path / "t.csv"
    write_price_table(path, [{"d": 2, "rho": 0.0, "j": 1, "net_price": 1.0, "mc_price": 1.5,
                              "mc_ci_lo": 1.4, "mc_ci_hi": 1.6}])
    assert path.read_text().splitlines() == ["d,rho,j,net_price,mc_price,mc_ci_lo,mc_ci_hi",
                                             "2,0.0,1,1.000000,1.500000,1.400000,1.600000"]
