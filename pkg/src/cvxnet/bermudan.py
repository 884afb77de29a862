"""Best-of Bermudan calls by backward dynamic programming with convex continuation nets."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .market import BlackScholesModel, PathGrid, simulate_paths
from .network import NetConfig, NumericOverflowError, ScaledNet
from .training import LossTrace, NetTrainer, TrainConfig, TrainingAborted, _rates

log = logging.getLogger(__name__)

_PILOT_STREAM = 1 << 62
_EVAL_STREAM = 1 << 60

# Reference lower/upper bounds of the deep optimal stopping method, keyed by
# (case, d, s0), for r = 5%, sigma = 20%, delta = 10%, K = 100, T = 3, N = 9.
DOS_REFERENCE = {
    ("symmetric", 2, 90): (8.072, 8.075),
    ("symmetric", 2, 100): (13.895, 13.903),
    ("symmetric", 2, 110): (21.353, 21.346),
    ("symmetric", 3, 90): (11.290, 11.283),
    ("symmetric", 3, 100): (18.690, 18.691),
    ("symmetric", 3, 110): (27.564, 27.581),
    ("symmetric", 5, 90): (16.648, 16.640),
    ("symmetric", 5, 100): (26.156, 26.162),
    ("symmetric", 5, 110): (36.766, 36.777),
    ("symmetric", 10, 90): (26.208, 26.272),
    ("symmetric", 10, 100): (38.321, 38.353),
    ("symmetric", 10, 110): (50.857, 50.914),
    ("symmetric", 20, 90): (37.701, 37.903),
    ("symmetric", 20, 100): (51.571, 51.765),
    ("symmetric", 20, 110): (65.494, 65.762),
    ("symmetric", 30, 90): (44.797, 45.110),
    ("symmetric", 30, 100): (59.498, 59.820),
    ("symmetric", 30, 110): (74.221, 74.515),
    ("asymmetric", 2, 90): (14.325, 14.352),
    ("asymmetric", 2, 100): (19.802, 19.813),
    ("asymmetric", 2, 110): (27.170, 27.147),
    ("asymmetric", 3, 90): (19.093, 19.089),
    ("asymmetric", 3, 100): (26.680, 26.684),
    ("asymmetric", 3, 110): (35.842, 35.817),
    ("asymmetric", 5, 90): (27.662, 27.662),
    ("asymmetric", 5, 100): (37.976, 37.995),
    ("asymmetric", 5, 110): (49.485, 49.513),
    ("asymmetric", 10, 90): (85.937, 86.037),
    ("asymmetric", 10, 100): (104.692, 104.791),
    ("asymmetric", 10, 110): (123.668, 123.823),
    ("asymmetric", 20, 90): (125.916, 126.275),
    ("asymmetric", 20, 100): (149.587, 149.970),
    ("asymmetric", 20, 110): (173.262, 173.809),
    ("asymmetric", 30, 90): (154.486, 154.913),
    ("asymmetric", 30, 100): (181.275, 181.898),
    ("asymmetric", 30, 110): (208.223, 208.891),
}


@dataclass
class BermudanSpec:
    """Best-of call ``e^{-r t_k} (max_i s_i - K)_+`` exercisable on ``grid``."""

    K: float
    grid: PathGrid
    r: float

    def __post_init__(self):
        if not self.K > 0:
            raise ValueError("strike must be positive")

    @property
    def N(self) -> int:
        return self.grid.N


def payoff(spec: BermudanSpec, k: int, s) -> np.ndarray:
    """Discounted best-of call payoff at date ``k``; ``s`` is ``(d,)`` or ``(B, d)``."""
    s = np.asarray(s, dtype=np.float64)
    disc = np.exp(-spec.r * spec.grid.times[k])
    return disc * np.maximum(s.max(axis=-1) - spec.K, 0.0)


def reference_market(d: int, case: str = "symmetric") -> BlackScholesModel:
    """Independent assets, ``r = 5%``, ``delta = 10%``; the asymmetric case spreads the volatilities."""
    if case == "symmetric":
        sigma = np.full(d, 0.2)
    elif case == "asymmetric":
        i = np.arange(1, d + 1)
        sigma = 0.08 + 0.32 * (i - 1) / (d - 1) if d <= 5 else 0.1 + i / (2.0 * d)
    else:
        raise ValueError(f"unknown case {case!r}")
    return BlackScholesModel(0.05, sigma, delta=0.1)


def reference_spec(r: float = 0.05, K: float = 100.0, T: float = 3.0, N: int = 9) -> BermudanSpec:
    return BermudanSpec(K, PathGrid.uniform(T, N), r)


class ConstantContinuation:
    """Continuation value that ignores the state; handy for fixed policies."""

    def __init__(self, value: float):
        self.value = float(value)

    def __call__(self, s):
        return np.full(np.shape(s)[0], self.value)


@dataclass
class StoppingPolicy:
    """Continuation estimates for dates ``0..N-1``.

    ``nets[0]`` is ``None`` when the initial state is deterministic; the scalar
    ``c0`` then stands in for the date-0 continuation value.
    """

    spec: BermudanSpec
    nets: list
    c0: float = np.inf

    def __post_init__(self):
        if len(self.nets) != self.spec.N:
            raise ValueError(f"need exactly N={self.spec.N} continuation estimates, got {len(self.nets)}")

    def continuation(self, k: int, s) -> np.ndarray:
        s = np.atleast_2d(s)
        net = self.nets[k]
        if net is None:
            return np.full(len(s), self.c0)
        return np.asarray(net(s), dtype=np.float64).reshape(len(s))

    def exercise(self, k: int, s) -> np.ndarray:
        """Stop when the payoff is positive and at least the continuation value."""
        g = payoff(self.spec, k, s)
        return (g > 0) & (g >= self.continuation(k, s))

    @classmethod
    def always_exercise(cls, spec: BermudanSpec) -> "StoppingPolicy":
        return cls(spec, [ConstantContinuation(-np.inf) for _ in range(spec.N)], -np.inf)

    @classmethod
    def never_exercise(cls, spec: BermudanSpec) -> "StoppingPolicy":
        return cls(spec, [ConstantContinuation(np.inf) for _ in range(spec.N)], np.inf)

    def fast(self) -> "StoppingPolicy":
        """Copy whose nets are collapsed to one affine layer; same function, cheaper."""
        nets = [n.collapsed() if isinstance(n, ScaledNet) else n for n in self.nets]
        return StoppingPolicy(self.spec, nets, self.c0)


@dataclass
class TrainedPolicy:
    policy: StoppingPolicy
    value: float
    """In-sample estimate: mean of the per-iteration ``v0`` over the last tenth of training."""
    v0_trace: np.ndarray
    losses: list[LossTrace] = field(default_factory=list)


def _pilot_scaling(m, spec, x0, paths: int, seed: int):
    s = simulate_paths(m, x0, spec.grid, paths, seed, _PILOT_STREAM)
    lo = np.quantile(s, 0.01, axis=0)
    hi = np.quantile(s, 0.99, axis=0)
    hi = np.where(hi > lo, hi, lo + 1.0)
    gN = payoff(spec, spec.N, s[:, -1])
    scale = float(gN.std())
    return lo, hi, float(gN.mean()), scale if scale > 0 else 1.0


def train_policy(m: BlackScholesModel, spec: BermudanSpec, x0, net_cfg: NetConfig | None = None,
                 cfg: TrainConfig | None = None, pilot_paths: int = 1 << 14) -> TrainedPolicy:
    """Backward training over fresh path batches, one Adam step per date per iteration.

    Every iteration simulates ``cfg.batch_size`` paths from ``x0``. Going
    backward from ``N-1``, the date-``k`` net takes one step towards the
    realized downstream values, then stopping decisions and values are updated
    pathwise. Nets persist across iterations. At date 0 the state is
    deterministic, so the continuation is the batch mean of ``v_1``.
    """
    net_cfg = net_cfg or NetConfig(arch="2-SL2SE", n=64, c=40.0)
    cfg = cfg or TrainConfig(batch_size=8 * 1024, iterations=5000, schedule=1e-4)
    x0 = np.broadcast_to(np.asarray(x0, dtype=np.float64), (m.d,))
    if np.any(x0 <= 0):
        raise ValueError("initial prices must be positive")
    if abs(spec.r - m.r) > 0:
        raise ValueError("spec discount rate differs from the model rate")
    N = spec.N
    lo, hi, shift, scale = _pilot_scaling(m, spec, x0, pilot_paths, cfg.seed)
    nets = [None] + [ScaledNet(net_cfg.build(m.d, seed=net_cfg.seed + k), lo[k], hi[k], shift, scale)
                     for k in range(1, N)]
    trainers = [None] + [NetTrainer(n.net) for n in nets[1:]]
    traces = [LossTrace() for _ in range(N)]
    rates = _rates(cfg.schedule, cfg.iterations)
    v0 = np.empty(cfg.iterations)
    c0_hist = np.empty(cfg.iterations)

    for i, rate in enumerate(rates, start=1):
        s = simulate_paths(m, x0, spec.grid, cfg.batch_size, cfg.seed, i)
        v = payoff(spec, N, s[:, N])
        for k in range(N - 1, 0, -1):
            sk = s[:, k]
            xk = nets[k].scale_inputs(sk)
            try:
                loss, pred = trainers[k].step_predict(xk, nets[k].scale_targets(v), rate)
            except NumericOverflowError as exc:
                raise TrainingAborted(f"iteration {i}, date {k}: {exc}", traces[k]) from exc
            traces[k].append(i, loss, float(rate))
            c = nets[k].out_shift + nets[k].out_scale * pred
            g = payoff(spec, k, sk)
            stop = (g > 0) & (g >= c)
            v = np.where(stop, g, v)
        c0 = float(v.mean())
        g0 = float(payoff(spec, 0, x0))
        c0_hist[i - 1] = c0
        v0[i - 1] = g0 if (g0 > 0 and g0 >= c0) else c0
        if i % 500 == 0:
            log.info("iteration %d: v0 %.4f", i, v0[i - 1])

    tail = max(1, cfg.iterations // 10)
    c0 = float(c0_hist[-tail:].mean()) if cfg.iterations else np.inf
    policy = StoppingPolicy(spec, nets, c0)
    value = float(v0[-tail:].mean()) if cfg.iterations else float("nan")
    return TrainedPolicy(policy, value, v0, traces)


def lower_bound_price(policy: StoppingPolicy, m: BlackScholesModel, spec: BermudanSpec, x0,
                      paths: int, seed: int, chunk: int = 1 << 16) -> tuple[float, float]:
    """Out-of-sample value of the policy's stopping rule, with its standard error.

    Paths come from a stream no training run uses, so the estimate is an
    unbiased value of an admissible stopping time, hence a lower bound.
    """
    if paths < 2:
        raise ValueError("need at least two paths")
    fast = policy.fast()
    total = total_sq = 0.0
    for start in range(0, paths, chunk):
        count = min(chunk, paths - start)
        s = simulate_paths(m, x0, spec.grid, count, seed, _EVAL_STREAM, start)
        value = np.zeros(count)
        alive = np.ones(count, dtype=bool)
        for k in range(spec.N):
            idx = np.flatnonzero(alive)
            if idx.size == 0:
                break
            sk = s[idx, k]
            g = payoff(spec, k, sk)
            itm = g > 0
            stop = np.zeros(idx.size, dtype=bool)
            if np.any(itm):
                stop[itm] = g[itm] >= fast.continuation(k, sk[itm])
            value[idx[stop]] = g[stop]
            alive[idx[stop]] = False
        value[alive] = payoff(spec, spec.N, s[alive, spec.N])
        total += value.sum()
        total_sq += value @ value
    mean = total / paths
    var = max(total_sq / paths - mean * mean, 0.0) * paths / (paths - 1)
    return float(mean), float(np.sqrt(var / paths))


PRICE_REPORT_HEADER = ["d", "s0", "case", "price", "std_error", "paper_dos_lower", "paper_dos_upper"]


def write_price_report(path, rows) -> None:
    """Rows carry ``d, s0, case, price, std_error``; DOS columns are filled from the reference table."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PRICE_REPORT_HEADER)
        for r in rows:
            lo, up = DOS_REFERENCE.get((r["case"], int(r["d"]), int(round(r["s0"]))), ("", ""))
            w.writerow([r["d"], f"{r['s0']:g}", r["case"], f"{r['price']:.6f}", f"{r['std_error']:.6f}", lo, up])
