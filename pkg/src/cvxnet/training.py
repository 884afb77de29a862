"""Adam training of convex networks on squared loss."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .network import LOGSUMEXP, ConvexNet, NetStack, NumericOverflowError

log = logging.getLogger(__name__)

# lambda = c * lambda_tilde must stay positive; Adam steps are projected back.
LAMBDA_TILDE_FLOOR = 1e-6


@dataclass
class LRSchedule:
    """Constant ``gamma0`` for ``warm_iters`` iterations, then geometric decay to ``floor``."""

    gamma0: float = 1e-3
    floor: float = 1e-5
    decay: float = 0.95
    warm_iters: int = 100

    def rate(self, i: int, prev: float | None = None) -> float:
        return schedule_rate(self, i, prev)

    def rates(self, iterations: int) -> np.ndarray:
        out = np.empty(iterations)
        prev = None
        for i in range(1, iterations + 1):
            prev = out[i - 1] = schedule_rate(self, i, prev)
        return out


def schedule_rate(s: LRSchedule, i: int, prev: float | None = None) -> float:
    if i < 1:
        raise ValueError("iterations are counted from 1")
    if i <= s.warm_iters or prev is None:
        return s.gamma0
    return max(s.floor, s.decay * prev)


def _rates(schedule, iterations: int) -> np.ndarray:
    if isinstance(schedule, LRSchedule):
        return schedule.rates(iterations)
    return np.full(iterations, float(schedule))


class Adam:
    """Adam with bias correction over a fixed list of parameter arrays."""

    def __init__(self, params: list[np.ndarray], beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray], rate: float) -> None:
        """Update ``params`` in place."""
        if len(params) != len(self.m):
            raise ValueError("parameter list does not match optimizer state")
        for g in grads:
            if not np.all(np.isfinite(g)):
                raise NumericOverflowError("non-finite gradient")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            if p.shape != np.shape(g):
                raise ValueError(f"gradient shape {np.shape(g)} != parameter shape {p.shape}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= rate * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def _trainables(net: ConvexNet) -> list[np.ndarray]:
    params = net.parameters()
    if net.activation.kind == LOGSUMEXP:
        params.append(np.array([net.activation.lambda_tilde]))
    return params


class NetTrainer:
    """Holds a net and its Adam state; one call of :meth:`step` is one update."""

    def __init__(self, net: ConvexNet, **adam_kw):
        self.net = net
        self._params = _trainables(net)
        self.opt = Adam(self._params, **adam_kw)

    def gradients(self, x, target) -> tuple[list[np.ndarray], float]:
        return self._gradients(x, target)[:2]

    def _gradients(self, x, target):
        target = np.asarray(target, dtype=np.float64)
        pred, grads = self.net.forward_backward(x, lambda out: 2.0 * (out - target) / len(target))
        resid = pred - target
        flat = [*grads.weights, *grads.biases]
        if self.net.activation.kind == LOGSUMEXP:
            flat.append(np.array([grads.lambda_tilde]))
        return flat, float(np.mean(resid * resid)), pred

    def step(self, x, target, rate: float) -> float:
        """One Adam step on the batch MSE; returns the pre-update loss."""
        return self.step_predict(x, target, rate)[0]

    def step_predict(self, x, target, rate: float) -> tuple[float, np.ndarray]:
        """As :meth:`step`, also returning the pre-update predictions."""
        grads, loss, pred = self._gradients(x, target)
        self.opt.step(self._params, grads, rate)
        if self.net.activation.kind == LOGSUMEXP:
            lt = max(self._params[-1][0], LAMBDA_TILDE_FLOOR)
            self._params[-1][0] = lt
            self.net.activation.lambda_tilde = float(lt)
        return loss, pred


class StackTrainer:
    """Adam over a :class:`NetStack`; every net sees its own targets."""

    def __init__(self, stack: NetStack, **adam_kw):
        self.stack = stack
        self._params = stack.parameters()
        if stack.kind == LOGSUMEXP:
            self._params.append(stack.lambda_tilde)
        self.opt = Adam(self._params, **adam_kw)

    def step(self, x, target, rate: float, weight=None) -> np.ndarray:
        """One step on per-net MSE; ``weight`` (G, B) masks samples. Returns per-net loss."""
        target = np.asarray(target, dtype=np.float64)
        if weight is None:
            weight = np.ones(np.broadcast_shapes(target.shape, (len(self.stack), 1)))
        count = np.maximum(weight.sum(axis=1, keepdims=True), 1.0)
        pred, grads, lt_grad = self.stack.forward_backward(
            x, lambda out: 2.0 * weight * (out - target) / count)
        resid = pred - target
        if self.stack.kind == LOGSUMEXP:
            grads.append(lt_grad)
        self.opt.step(self._params, grads, rate)
        if self.stack.kind == LOGSUMEXP:
            np.maximum(self.stack.lambda_tilde, LAMBDA_TILDE_FLOOR, out=self.stack.lambda_tilde)
        return (weight * resid * resid).sum(axis=1) / count[:, 0]


@dataclass
class TrainConfig:
    batch_size: int = 64
    iterations: int = 1000
    schedule: LRSchedule | float = field(default_factory=LRSchedule)
    seed: int = 0
    steps_per_iteration: int = 1
    """Adam steps per schedule iteration, e.g. one pass over a pool of batches."""

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.steps_per_iteration < 1:
            raise ValueError("steps_per_iteration must be >= 1")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")


@dataclass
class LossTrace:
    iters: list[int] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)

    def append(self, i: int, loss: float, lr: float) -> None:
        self.iters.append(i)
        self.loss.append(loss)
        self.lr.append(lr)

    def __len__(self) -> int:
        return len(self.iters)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iter", "loss", "lr"])
            for row in zip(self.iters, self.loss, self.lr):
                w.writerow([row[0], repr(row[1]), repr(row[2])])


class TrainingAborted(NumericOverflowError):
    """Numeric failure mid-training; ``trace`` holds the iterations completed."""

    def __init__(self, msg: str, trace: LossTrace):
        super().__init__(msg)
        self.trace = trace


Sampler = Callable[[int, int], tuple[np.ndarray, np.ndarray]]


def fresh_sampler(draw: Callable[[np.random.Generator, int], tuple[np.ndarray, np.ndarray]],
                  seed: int) -> Sampler:
    """Sampler drawing a new batch per iteration from ``draw(rng, batch_size)``."""

    def sample(i: int, batch_size: int):
        return draw(np.random.default_rng([seed, i]), batch_size)

    return sample


def pool_sampler(inputs: np.ndarray, targets: np.ndarray) -> Sampler:
    """Sampler cycling through a fixed dataset in order, batch by batch."""
    size = len(inputs)

    def sample(i: int, batch_size: int):
        idx = (np.arange(batch_size) + (i - 1) * batch_size) % size
        return inputs[idx], targets[idx]

    return sample


def train_regression(net: ConvexNet, sampler: Sampler, cfg: TrainConfig,
                     trainer: NetTrainer | None = None) -> tuple[ConvexNet, LossTrace]:
    """Run ``cfg.iterations`` schedule iterations of Adam on batch MSE; the net is updated in place.

    Each iteration takes ``cfg.steps_per_iteration`` steps at the same rate
    and records their mean loss. ``sampler(j, batch_size)`` returns the
    ``j``-th batch (``j`` counts steps from 1).
    """
    trainer = trainer or NetTrainer(net)
    trace = LossTrace()
    per = cfg.steps_per_iteration
    for i, rate in enumerate(_rates(cfg.schedule, cfg.iterations), start=1):
        total = 0.0
        for j in range((i - 1) * per + 1, i * per + 1):
            x, y = sampler(j, cfg.batch_size)
            try:
                total += trainer.step(x, y, rate)
            except NumericOverflowError as exc:
                raise TrainingAborted(f"iteration {i}: {exc}", trace) from exc
        trace.append(i, total / per, float(rate))
    return net, trace
