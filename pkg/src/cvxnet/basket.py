"""Basket call price surfaces learned from control-variate Monte Carlo targets."""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass

import numpy as np

from .market import BlackScholesModel, ModelError, norm_cdf, normals
from .network import NetConfig, ScaledNet
from .training import LossTrace, NetTrainer, TrainConfig, pool_sampler, train_regression

log = logging.getLogger(__name__)

# Stream ids: targets for pool input b use stream b; input sampling uses its own.
_INPUT_STREAM = 1 << 62
_FRESH_STREAM = 1 << 61


@dataclass
class BasketSpec:
    alpha: np.ndarray
    K: float
    T: float

    def __post_init__(self):
        self.alpha = np.atleast_1d(np.asarray(self.alpha, dtype=np.float64))
        if np.any(self.alpha <= 0) or abs(self.alpha.sum() - 1.0) > 1e-12:
            raise ValueError("basket weights must be positive and sum to one")
        if not self.K > 0:
            raise ValueError("strike must be positive")
        if not self.T > 0:
            raise ValueError("maturity must be positive")


@dataclass
class InputBox:
    x0: np.ndarray
    R: float

    def __post_init__(self):
        self.x0 = np.atleast_1d(np.asarray(self.x0, dtype=np.float64))
        if self.R < 0 or np.any(self.x0 - self.R <= 0):
            raise ValueError("input box must lie in the positive orthant")

    @property
    def lo(self):
        return self.x0 - self.R

    @property
    def hi(self):
        return self.x0 + self.R

    def contains(self, s) -> np.ndarray:
        s = np.asarray(s)
        return np.all((s >= self.lo) & (s <= self.hi), axis=-1)


def reference_setup(d: int, rho: float) -> tuple[BlackScholesModel, BasketSpec, InputBox]:
    """The basket experiment: ``sigma_i = 0.2 + 0.008 i``, ``x0_i = 100 - i``, ``R = 20``."""
    i = np.arange(1, d + 1)
    model = BlackScholesModel.equicorrelated(0.06, 0.2 + 0.008 * i, rho)
    return model, BasketSpec(np.full(d, 1.0 / d), 80.0, 0.5), InputBox(100.0 - i, 20.0)


def test_point(d: int, j: int) -> np.ndarray:
    """``s0_i = 85 - i + 6 j``."""
    return 85.0 - np.arange(1, d + 1) + 6.0 * j


def _check_no_dividends(m: BlackScholesModel):
    if np.any(m.delta != 0):
        raise ModelError("basket pricing assumes zero dividend rates")


def geometric_basket_price(m: BlackScholesModel, spec: BasketSpec, s0) -> np.ndarray:
    """Discounted price of the call on the geometric basket ``exp(sum alpha_i log S_T^i)``.

    ``s0`` may be ``(d,)`` or a batch ``(B, d)``.
    """
    _check_no_dividends(m)
    s0 = np.asarray(s0, dtype=np.float64)
    T, K, al = spec.T, spec.K, spec.alpha
    var = T * al @ m.covariance @ al
    a = np.log(s0) @ al + T * al @ (m.r - 0.5 * m.sigma ** 2)
    disc = np.exp(-m.r * T)
    if var <= 0:
        return disc * np.maximum(np.exp(a) - K, 0.0)
    sd = np.sqrt(var)
    kappa = (a - np.log(K)) / sd
    return disc * (np.exp(a + 0.5 * var) * norm_cdf(kappa + sd) - K * norm_cdf(kappa))


def _payoff_legs(m: BlackScholesModel, spec: BasketSpec, s0, z):
    log_st = np.log(s0) + m._log_step(z, spec.T)
    arith = np.maximum(np.exp(log_st) @ spec.alpha - spec.K, 0.0)
    geo = np.maximum(np.exp(log_st @ spec.alpha) - spec.K, 0.0)
    return arith, geo


def mc_cv_estimate(m: BlackScholesModel, spec: BasketSpec, s0, M: int, seed: int,
                   stream: int = 0, chunk: int = 1 << 18) -> tuple[float, float]:
    """Control-variate estimator and its standard error.

    The same draws feed the arithmetic and geometric payoffs; the geometric
    leg's exact price is added back.
    """
    if M < 2:
        raise ValueError("need M >= 2")
    _check_no_dividends(m)
    s0 = np.asarray(s0, dtype=np.float64)
    total = total_sq = 0.0
    for start in range(0, M, chunk):
        z = normals(seed, min(chunk, M - start), m.d, stream, start)
        arith, geo = _payoff_legs(m, spec, s0, z)
        diff = arith - geo
        total += diff.sum()
        total_sq += diff @ diff
    disc = np.exp(-m.r * spec.T)
    mean = total / M
    var = max(total_sq / M - mean * mean, 0.0) * M / (M - 1)
    price = disc * mean + float(geometric_basket_price(m, spec, s0))
    return float(price), float(disc * np.sqrt(var / M))


def mc_plain_estimate(m: BlackScholesModel, spec: BasketSpec, s0, M: int, seed: int,
                      stream: int = 0) -> tuple[float, float]:
    """Plain Monte Carlo on the arithmetic payoff (the baseline the control variate improves)."""
    _check_no_dividends(m)
    z = normals(seed, M, m.d, stream)
    arith, _ = _payoff_legs(m, spec, np.asarray(s0, dtype=np.float64), z)
    disc = np.exp(-m.r * spec.T)
    return float(disc * arith.mean()), float(disc * arith.std(ddof=1) / np.sqrt(M))


def sample_initial_prices(box: InputBox, count: int, seed: int, stream: int = _INPUT_STREAM) -> np.ndarray:
    """Componentwise uniform draws on ``prod [x0_i - R, x0_i + R]``."""
    rng = np.random.Generator(np.random.Philox(key=[seed, stream]))
    u = rng.random((count, box.x0.size))
    return box.lo + 2.0 * box.R * u


def cv_targets(m: BlackScholesModel, spec: BasketSpec, s0s: np.ndarray, M: int, seed: int,
               first_stream: int = 0) -> np.ndarray:
    """Control-variate estimates for every row of ``s0s``; row ``b`` uses stream ``first_stream + b``."""
    s0s = np.asarray(s0s, dtype=np.float64)
    disc = np.exp(-m.r * spec.T)
    out = np.empty(len(s0s))
    for b, s0 in enumerate(s0s):
        z = normals(seed, M, m.d, first_stream + b)
        arith, geo = _payoff_legs(m, spec, s0, z)
        out[b] = disc * (arith - geo).mean()
    return out + geometric_basket_price(m, spec, s0s)


@dataclass
class PriceSurface:
    net: ScaledNet
    spec: BasketSpec
    model: BlackScholesModel
    box: InputBox
    trace: LossTrace

    def __call__(self, s0):
        return price_at(self, s0)


def train_price_surface(m: BlackScholesModel, spec: BasketSpec, box: InputBox, net_cfg: NetConfig,
                        M_train: int, cfg: TrainConfig, pool_size: int | None = 38400) -> PriceSurface:
    """Fit a convex net to control-variate prices over the input box.

    With ``pool_size`` set, a fixed pool of inputs (and their targets) is
    cycled in batches; with ``None`` every iteration draws fresh inputs.
    """
    if m.d != box.x0.size or m.d != spec.alpha.size:
        raise ValueError("model, basket and box dimensions differ")
    if pool_size:
        inputs = sample_initial_prices(box, pool_size, cfg.seed)
        log.info("computing %d control-variate targets (M=%d)", pool_size, M_train)
        targets = cv_targets(m, spec, inputs, M_train, cfg.seed)
        shift, scale = float(targets.mean()), float(targets.std())
    else:
        inputs = targets = None
        pilot = sample_initial_prices(box, 256, cfg.seed, _INPUT_STREAM - 1)
        pt = cv_targets(m, spec, pilot, M_train, cfg.seed, _FRESH_STREAM - 256)
        shift, scale = float(pt.mean()), float(pt.std())
    scaled = ScaledNet(net_cfg.build(m.d), box.lo, box.hi, shift, scale if scale > 0 else 1.0)

    if pool_size:
        base = pool_sampler(scaled.scale_inputs(inputs), scaled.scale_targets(targets))
    else:
        def base(i, batch):
            s = sample_initial_prices(box, batch, cfg.seed, _INPUT_STREAM + i)
            t = cv_targets(m, spec, s, M_train, cfg.seed, _FRESH_STREAM + (i - 1) * batch)
            return scaled.scale_inputs(s), scaled.scale_targets(t)

    _, trace = train_regression(scaled.net, base, cfg, NetTrainer(scaled.net))
    return PriceSurface(scaled, spec, m, box, trace)


def price_at(surface: PriceSurface, s0):
    s0 = np.asarray(s0, dtype=np.float64)
    if not np.all(surface.box.contains(s0)):
        warnings.warn("evaluating price surface outside its training box", stacklevel=2)
    return surface.net(s0)


PRICE_TABLE_HEADER = ["d", "rho", "j", "net_price", "mc_price", "mc_ci_lo", "mc_ci_hi"]


def write_price_table(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PRICE_TABLE_HEADER)
        for r in rows:
            w.writerow([r["d"], r["rho"], r["j"], *(f"{r[k]:.6f}" for k in PRICE_TABLE_HEADER[3:])])
