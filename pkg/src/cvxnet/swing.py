"""Swing (take-or-pay) contracts priced by volume-constrained dynamic programming.

At each date the continuation value ``E[v_{k+1}(X_{k+1}, Q) | X_k = x]`` is a
convex function of the Gaussian factor ``x`` for every cumulative volume
``Q``. Two representations are offered:

* ``shared``: one convex net per date plus ``kappa * L(Q)``, so a single set of
  hyperplanes serves every volume;
* ``per_volume``: one convex net per date and per reachable volume, trained
  side by side.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .market import GasForwardModel, PathGrid, norm_cdf, normals, simulate_gas_factor
from .network import LOGSUMEXP, ConvexNet, NetConfig, NetStack, NumericOverflowError, _reduce_with_weights
from .training import (LAMBDA_TILDE_FLOOR, Adam, LossTrace, StackTrainer, TrainConfig,
                       TrainingAborted, _rates)

log = logging.getLogger(__name__)

SHARED = "shared"
PER_VOLUME = "per_volume"
_MODES = (SHARED, PER_VOLUME)

_EVAL_STREAM = 1 << 60
_C0_STREAM = 1 << 59

# Benchmark prices for the three volume bands, alpha = 4, sigma = 0.7, F0 = K = 20, N = 31.
BENCHMARKS = {(20, 25): 8.36, (20, 30): 14.01, (20, 22): 4.50}


class InfeasibleSpecError(ValueError):
    """The local and global volume constraints cannot be met together."""


@dataclass
class SwingSpec:
    """``N`` purchase dates ``t_k = k dt``, ``q_k`` in ``[q_lo, q_hi]``, ``sum q_k`` in ``[Q_lo, Q_hi]``."""

    N: int
    K: float
    q_lo: int = 0
    q_hi: int = 1
    Q_lo: int = 0
    Q_hi: int = 1
    dt: float = 1.0 / 360.0

    def __post_init__(self):
        for name in ("N", "q_lo", "q_hi", "Q_lo", "Q_hi"):
            v = getattr(self, name)
            if int(v) != v:
                raise ValueError(f"{name} must be an integer")
            setattr(self, name, int(v))
        if self.N < 1:
            raise ValueError("need at least one exercise date")
        if not self.dt > 0:
            raise ValueError("date spacing must be positive")
        if not 0 <= self.q_lo <= self.q_hi:
            raise InfeasibleSpecError("need 0 <= q_lo <= q_hi")
        if not 0 <= self.Q_lo <= self.Q_hi:
            raise InfeasibleSpecError("need 0 <= Q_lo <= Q_hi")
        if self.N * self.q_lo > self.Q_hi or self.Q_lo > self.N * self.q_hi:
            raise InfeasibleSpecError("global volume band unreachable with the local bounds")
        if self.Q_lo == self.Q_hi == 0:
            raise InfeasibleSpecError("volume transform undefined for Q_lo = Q_hi = 0")

    @property
    def grid(self) -> PathGrid:
        return PathGrid(np.arange(self.N) * self.dt)


def reference_swing_spec(Q_lo: int, Q_hi: int, dt: float = 1.0 / 360.0) -> SwingSpec:
    return SwingSpec(31, 20.0, 0, 1, Q_lo, Q_hi, dt)


def reference_gas_model() -> GasForwardModel:
    return GasForwardModel(alpha=4.0, sigma=0.7, f0=20.0)


def volume_transform(spec: SwingSpec, Q):
    """``L(Q)``: ``Q`` rescaled to ``[0, 1]`` over the global band (or by ``Q_hi`` if degenerate)."""
    Q = np.asarray(Q, dtype=np.float64)
    if spec.Q_lo != spec.Q_hi:
        return (Q - spec.Q_lo) / (spec.Q_hi - spec.Q_lo)
    return (Q - spec.Q_lo) / spec.Q_hi


def admissible_interval(spec: SwingSpec, k: int, Q):
    """Bounds ``(lo, hi)`` on ``q_k`` keeping the final band reachable; vectorized in ``Q``."""
    if not 0 <= k < spec.N:
        raise ValueError(f"date {k} outside 0..{spec.N - 1}")
    Q = np.asarray(Q)
    lo = np.maximum(spec.q_lo, spec.Q_lo - Q - (spec.N - 1 - k) * spec.q_hi)
    hi = np.minimum(spec.q_hi, spec.Q_hi - Q)
    if np.any(lo > hi):
        raise InfeasibleSpecError(f"no admissible volume at date {k}")
    return lo, hi


@dataclass
class VolumeGrid:
    """Reachable cumulative volumes ``levels[k]`` before the date-``k`` decision, ``k = 0..N``."""

    levels: list[np.ndarray]

    def column(self, k: int, Q) -> np.ndarray:
        """Positions of volumes ``Q`` within ``levels[k]``."""
        lev = self.levels[k]
        idx = np.searchsorted(lev, Q)
        if np.any(idx >= lev.size) or np.any(lev[np.minimum(idx, lev.size - 1)] != Q):
            raise KeyError(f"volume not reachable at date {k}")
        return idx


def reachable_volumes(spec: SwingSpec) -> VolumeGrid:
    """Forward propagation of bang-bang decisions from ``Q_0 = 0``."""
    levels = [np.array([0], dtype=np.int64)]
    for k in range(spec.N):
        Q = levels[-1]
        lo, hi = admissible_interval(spec, k, Q)
        levels.append(np.unique(np.concatenate([Q + lo, Q + hi])))
    return VolumeGrid(levels)


def _endpoint_values(spec, k, Q, F, cont_at):
    """Best of the two endpoint actions at date ``k``.

    ``cont_at(Q_next)`` returns the continuation value at volume ``Q_next``
    (array aligned with ``F``). Returns ``(value, q)``; ties go to the lower end.
    """
    lo, hi = admissible_interval(spec, k, Q)
    v_lo = lo * (F - spec.K) + cont_at(Q + lo)
    v_hi = hi * (F - spec.K) + cont_at(Q + hi)
    take_hi = v_hi > v_lo
    return np.where(take_hi, v_hi, v_lo), np.where(take_hi, hi, lo)


class SharedContinuation:
    """``out_shift + out_scale * (net(x~) + kappa * L(Q))`` with ``x~`` the factor mapped to ``[0, 1]``."""

    mode = SHARED

    def __init__(self, net: ConvexNet, lo: float, hi: float, volumes: np.ndarray, L: np.ndarray,
                 out_shift: float, out_scale: float, kappa: float = 0.0):
        self.net, self.lo, self.hi = net, float(lo), float(hi)
        self.volumes, self.L = np.asarray(volumes), np.asarray(L, dtype=np.float64)
        self.out_shift, self.out_scale, self.kappa = float(out_shift), float(out_scale), float(kappa)

    def scale_inputs(self, x):
        return ((np.asarray(x, dtype=np.float64) - self.lo) / (self.hi - self.lo))[:, None]

    def values(self, x) -> np.ndarray:
        """Continuation at every volume, shape ``(B, G)``."""
        base = self.net.forward(self.scale_inputs(x))
        return self.out_shift + self.out_scale * (base[:, None] + self.kappa * self.L[None, :])

    def values_at(self, x, cols: np.ndarray) -> np.ndarray:
        base = self.net.forward(self.scale_inputs(x))
        return self.out_shift + self.out_scale * (base + self.kappa * self.L[cols])

    def for_volume(self, j: int):
        """The convex map ``x -> continuation`` at volume index ``j``."""
        return lambda x: self.values_at(np.ravel(x), np.full(np.size(x), j))

    def fast(self) -> "SharedContinuation":
        return SharedContinuation(self.net.collapsed(), self.lo, self.hi, self.volumes, self.L,
                                  self.out_shift, self.out_scale, self.kappa)


class PerVolumeContinuation:
    """One net per volume: ``out_shift[j] + out_scale * net_j(x~)``."""

    mode = PER_VOLUME

    def __init__(self, stack: NetStack, lo: float, hi: float, volumes: np.ndarray,
                 out_shift: np.ndarray, out_scale: float):
        self.stack, self.lo, self.hi = stack, float(lo), float(hi)
        self.volumes = np.asarray(volumes)
        self.out_shift = np.asarray(out_shift, dtype=np.float64)
        self.out_scale = float(out_scale)
        self._affine = None

    def scale_inputs(self, x):
        return ((np.asarray(x, dtype=np.float64) - self.lo) / (self.hi - self.lo))[:, None]

    def values(self, x) -> np.ndarray:
        out = self.stack.forward(self.scale_inputs(x))
        return (self.out_shift[:, None] + self.out_scale * out).T

    def _collapsed(self):
        if self._affine is None:
            nets = self.stack.unstack()
            self._affine = [n.collapse_to_affine() for n in nets]
        return self._affine

    def values_at(self, x, cols: np.ndarray) -> np.ndarray:
        """Continuation at volume index ``cols[b]`` for each ``x[b]``; groups inputs by net."""
        x = np.asarray(x, dtype=np.float64)
        xs = self.scale_inputs(x)[:, 0]
        out = np.empty(x.size)
        affine = self._collapsed()
        for j in np.unique(cols):
            sel = np.flatnonzero(cols == j)
            w, b = affine[j]
            y = xs[sel, None] * w[:, 0] + b
            phi, _ = _reduce_with_weights(y, self.stack.kind, self.stack.lam[j])
            out[sel] = phi
        if not np.all(np.isfinite(out)):
            raise NumericOverflowError("non-finite continuation value")
        return self.out_shift[cols] + self.out_scale * out

    def for_volume(self, j: int):
        return lambda x: self.values_at(np.ravel(x), np.full(np.size(x), j))

    def fast(self) -> "PerVolumeContinuation":
        return self


@dataclass
class SwingNets:
    """Trained continuations for dates ``1..N-2`` plus scalar continuations at date 0.

    ``continuations[k]`` covers the volumes ``volumes.levels[k+1]``; entries
    for dates 0 and ``N-1`` are ``None`` (deterministic start, no future).
    """

    spec: SwingSpec
    model: GasForwardModel
    volumes: VolumeGrid
    mode: str
    continuations: list
    c0: np.ndarray
    value: float
    """In-sample date-0 value from the training draws."""
    traces: list[LossTrace] = field(default_factory=list)

    def continuation_at(self, k: int, x, Q_next) -> np.ndarray:
        """Continuation value at date ``k`` for factor ``x`` and post-decision volume ``Q_next``."""
        if k == self.spec.N - 1:
            return np.zeros(np.shape(x))
        cols = self.volumes.column(k + 1, Q_next)
        if k == 0:
            return self.c0[cols] + np.zeros(np.shape(x))
        return self.continuations[k].values_at(x, np.broadcast_to(cols, np.shape(x)))

    def fast(self) -> "SwingNets":
        conts = [c.fast() if c is not None else None for c in self.continuations]
        return SwingNets(self.spec, self.model, self.volumes, self.mode, conts, self.c0, self.value,
                         self.traces)


@dataclass
class SwingTrainConfig:
    """Per date: a pool of ``batches * batch_size`` factor pairs, cycled for ``iterations`` steps.

    ``warm_iterations`` applies to dates after the first trained one, whose
    nets start from the previous date's weights.
    """

    batch_size: int = 4096
    batches: int = 5
    iterations: int = 2000
    warm_iterations: int | None = None
    schedule: object = 1e-3
    seed: int = 0
    mode: str = SHARED
    warm_start: bool = True

    def __post_init__(self):
        if self.mode not in _MODES:
            raise ValueError(f"mode must be one of {_MODES}")
        if self.batch_size < 1 or self.batches < 1 or self.iterations < 0:
            raise ValueError("batch settings must be positive")


def _factor_pairs(m: GasForwardModel, grid: PathGrid, k: int, count: int, seed: int, stream: int):
    """Draws of ``(X_{t_k}, X_{t_{k+1}})`` from their exact joint law."""
    z = normals(seed, count, 2, stream)
    x_k = np.sqrt(m.x_variance(grid.times[k])) * z[:, 0]
    h = grid.times[k + 1] - grid.times[k]
    decay = np.exp(-m.alpha * h)
    x_next = decay * x_k + np.sqrt((1.0 - decay ** 2) / (2.0 * m.alpha)) * z[:, 1]
    return x_k, x_next


def _value_targets(spec, model, volumes, k_next, x_next, cont_next):
    """``v_{k+1}(x_next, Q)`` for every ``Q`` in ``levels[k+1]``, shape ``(B, G)``."""
    F = model.spot(x_next, spec.grid.times[k_next])
    levels = volumes.levels[k_next]
    out = np.empty((x_next.size, levels.size))
    if cont_next is not None:
        allc = cont_next.values(x_next)
    for j, Q in enumerate(levels):
        if cont_next is None:
            cont_at = lambda Qn: 0.0
        else:
            cont_at = lambda Qn: allc[:, volumes.column(k_next + 1, Qn)]
        out[:, j], _ = _endpoint_values(spec, k_next, Q, F, cont_at)
    return out


class _SharedTrainer:
    """Adam on ``net(x) + kappa * L_j`` against targets ``(B, G)``, all volumes at once."""

    def __init__(self, net: ConvexNet, L: np.ndarray, kappa: float = 0.0):
        self.net, self.L = net, np.asarray(L, dtype=np.float64)
        self.kappa = np.array([kappa])
        self._params = net.parameters() + [self.kappa]
        if net.activation.kind == LOGSUMEXP:
            self._lt = np.array([net.activation.lambda_tilde])
            self._params.append(self._lt)
        self.opt = Adam(self._params)

    def step(self, x, target, rate):
        B, G = target.shape
        state = {}

        def upstream(out):
            resid = out[:, None] + self.kappa[0] * self.L[None, :] - target
            state["resid"] = resid
            return 2.0 * resid.sum(axis=1) / (B * G)

        _, grads = self.net.forward_backward(x, upstream)
        resid = state["resid"]
        flat = [*grads.weights, *grads.biases, np.array([2.0 * (resid @ self.L).sum() / (B * G)])]
        if self.net.activation.kind == LOGSUMEXP:
            flat.append(np.array([grads.lambda_tilde]))
        self.opt.step(self._params, flat, rate)
        if self.net.activation.kind == LOGSUMEXP:
            self._lt[0] = max(self._lt[0], LAMBDA_TILDE_FLOOR)
            self.net.activation.lambda_tilde = float(self._lt[0])
        return float(np.mean(resid * resid))


def _train_date(k, x_in, targets, L, levels, lo, hi, net_cfg, cfg, iterations, previous):
    """Fit the date-``k`` continuation to ``targets (P, G)`` at scaled inputs ``x_in (P, 1)``."""
    G = levels.size
    scale = float(targets.std()) or 1.0
    trace = LossTrace()
    rates = _rates(cfg.schedule, iterations)
    P = len(x_in)
    bs = min(cfg.batch_size, P)

    if cfg.mode == SHARED:
        shift = float(targets.mean())
        y = (targets - shift) / scale
        if previous is not None and cfg.warm_start:
            net, kappa = previous.net.copy(), previous.kappa
        else:
            net, kappa = net_cfg.build(1, seed=net_cfg.seed + k), 0.0
        tr = _SharedTrainer(net, L, kappa)
        for i, rate in enumerate(rates, start=1):
            idx = (np.arange(bs) + (i - 1) * bs) % P
            try:
                loss = tr.step(x_in[idx], y[idx], rate)
            except NumericOverflowError as exc:
                raise TrainingAborted(f"date {k}, iteration {i}: {exc}", trace) from exc
            trace.append(i, loss, float(rate))
        cont = SharedContinuation(net, lo, hi, levels, L, shift, scale, float(tr.kappa[0]))
        return cont, trace

    shift = targets.mean(axis=0)
    y = ((targets - shift) / scale).T
    if previous is not None and cfg.warm_start:
        # Reuse the net of the nearest volume at the later date.
        prev_nets = previous.stack.unstack()
        src = np.clip(np.searchsorted(previous.volumes, levels), 0, previous.volumes.size - 1)
        nets = [prev_nets[s].copy() for s in src]
    else:
        nets = [net_cfg.build(1, seed=net_cfg.seed + 1000 * k + j) for j in range(G)]
    stack = NetStack(nets)
    tr = StackTrainer(stack)
    for i, rate in enumerate(rates, start=1):
        idx = (np.arange(bs) + (i - 1) * bs) % P
        try:
            losses = tr.step(x_in[idx], y[:, idx], rate)
        except NumericOverflowError as exc:
            raise TrainingAborted(f"date {k}, iteration {i}: {exc}", trace) from exc
        trace.append(i, float(losses.mean()), float(rate))
    return PerVolumeContinuation(stack, lo, hi, levels, shift, scale), trace


def train_swing(m: GasForwardModel, spec: SwingSpec, net_cfg: NetConfig | None = None,
                cfg: SwingTrainConfig | None = None) -> SwingNets:
    """Backward training of the continuation nets, from date ``N-2`` down to 1.

    The date-``k`` continuation regresses ``v_{k+1}(X_{t_{k+1}}, Q)`` on
    ``X_{t_k}`` for every reachable ``Q``, where ``v_{k+1}`` takes the best
    endpoint action using the already trained date-``k+1`` continuation.
    """
    net_cfg = net_cfg or NetConfig(arch="2-SL2SE", n=32, c=20.0)
    cfg = cfg or SwingTrainConfig()
    volumes = reachable_volumes(spec)
    grid = PathGrid(np.arange(spec.N + 1) * spec.dt)
    P = cfg.batch_size * cfg.batches
    N = spec.N
    conts = [None] * N
    traces = []
    first = True
    for k in range(N - 2, 0, -1):
        x_k, x_next = _factor_pairs(m, grid, k, P, cfg.seed, k)
        fast_next = conts[k + 1].fast() if conts[k + 1] is not None else None
        targets = _value_targets(spec, m, volumes, k + 1, x_next, fast_next)
        levels = volumes.levels[k + 1]
        sd = np.sqrt(m.x_variance(grid.times[k]))
        lo, hi = -4.0 * sd, 4.0 * sd
        x_in = ((x_k - lo) / (hi - lo))[:, None]
        iterations = cfg.iterations if first or cfg.warm_iterations is None else cfg.warm_iterations
        conts[k], trace = _train_date(k, x_in, targets, volume_transform(spec, levels), levels, lo, hi,
                                      net_cfg, cfg, iterations, conts[k + 1])
        traces.append(trace)
        first = False
        log.info("date %d: %d volumes, final loss %.3g", k, levels.size,
                 trace.loss[-1] if len(trace) else float("nan"))

    if N >= 2:
        _, x1 = _factor_pairs(m, grid, 0, P, cfg.seed, _C0_STREAM)
        fast1 = conts[1].fast() if conts[1] is not None else None
        c0 = _value_targets(spec, m, volumes, 1, x1, fast1).mean(axis=0)
    else:
        c0 = np.zeros(volumes.levels[1].size)
    nets = SwingNets(spec, m, volumes, cfg.mode, conts, c0, float("nan"), traces)
    F0 = m.spot(0.0, 0.0)
    v0, _ = _endpoint_values(spec, 0, np.array([0]), np.array([F0]),
                             lambda Qn: nets.continuation_at(0, np.zeros(1), Qn))
    nets.value = float(v0[0])
    return nets


def evaluate_swing(nets: SwingNets, m: GasForwardModel, spec: SwingSpec, paths: int, seed: int,
                   chunk: int = 1 << 17) -> tuple[float, float]:
    """Out-of-sample value of the strategy induced by ``nets``, with its standard error.

    Every path's volumes are checked against the constraints; a violation is
    an internal error since the admissible interval rules it out.
    """
    if paths < 2:
        raise ValueError("need at least two paths")
    fast = nets.fast()
    grid = spec.grid
    total = total_sq = 0.0
    for start in range(0, paths, chunk):
        count = min(chunk, paths - start)
        x = simulate_gas_factor(m, grid, count, seed, _EVAL_STREAM, start)
        Q = np.zeros(count, dtype=np.int64)
        cash = np.zeros(count)
        for k in range(spec.N):
            F = m.spot(x[:, k], grid.times[k])
            _, q = _endpoint_values(spec, k, Q, F, lambda Qn: fast.continuation_at(k, x[:, k], Qn))
            if np.any(q < spec.q_lo) or np.any(q > spec.q_hi):
                raise RuntimeError(f"local volume constraint violated at date {k}")
            cash += q * (F - spec.K)
            Q = Q + q
        if np.any(Q < spec.Q_lo) or np.any(Q > spec.Q_hi):
            raise RuntimeError("global volume constraint violated")
        total += cash.sum()
        total_sq += cash @ cash
    mean = total / paths
    var = max(total_sq / paths - mean * mean, 0.0) * paths / (paths - 1)
    return float(mean), float(np.sqrt(var / paths))


def unconstrained_value(m: GasForwardModel, spec: SwingSpec) -> float:
    """``sum_k E[q_hi (F_{t_k} - K)_+]``: the value when the global band never binds."""
    t = spec.grid.times
    lam = np.sqrt(m.lambda_sq(t))
    F0, K = m.f0, spec.K
    with np.errstate(divide="ignore", invalid="ignore"):
        d1 = np.where(lam > 0, (np.log(F0 / K) + 0.5 * lam ** 2) / np.where(lam > 0, lam, 1.0), 0.0)
    calls = np.where(lam > 0, F0 * norm_cdf(d1) - K * norm_cdf(d1 - lam), max(F0 - K, 0.0))
    return float(spec.q_hi * calls.sum())


REPORT_HEADER = ["Q_lo", "Q_hi", "price", "std_error", "benchmark"]


def write_report(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_HEADER)
        for r in rows:
            bench = BENCHMARKS.get((r["Q_lo"], r["Q_hi"]), "")
            w.writerow([r["Q_lo"], r["Q_hi"], f"{r['price']:.6f}", f"{r['std_error']:.6f}", bench])
