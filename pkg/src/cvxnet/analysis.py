"""Numerical counterparts of the approximation theory behind max-affine networks.

* tangents of a convex function at ``n`` points give a max-affine
  underestimator whose sup error on a box decays like ``n^(-2/d)``;
* the L^r error of that construction at an ``n``-quantizer of the input law
  is bounded by ``[grad f]_alpha * e_2(mu)^(alpha+1)``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .network import logsumexp


@dataclass
class MaxAffine:
    """``x -> max_i (slopes_i . x + intercepts_i)``, or its LogSumExp smoothing when ``lam`` is set."""

    slopes: np.ndarray
    intercepts: np.ndarray
    lam: float | None = None

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        d = self.slopes.shape[1]
        single = x.ndim == 1 and d > 1
        y = x.reshape(-1, d) @ self.slopes.T + self.intercepts
        out = y.max(axis=1) if self.lam is None else logsumexp(y, self.lam)
        return out[0] if single else out

    @property
    def n(self) -> int:
        return len(self.intercepts)


def _as_points(points) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64)
    return p[:, None] if p.ndim == 1 else p


def tangent_construction(f: Callable, grad: Callable, points, lam: float | None = None) -> MaxAffine:
    """Supporting hyperplanes ``f(x_i) + <grad f(x_i), x - x_i>`` at ``points``.

    ``f`` and ``grad`` act on a batch ``(n, d)`` (``grad`` may return a
    subgradient). The max of the tangents never exceeds a convex ``f``.
    """
    p = _as_points(points)
    fx = np.asarray(f(p), dtype=np.float64).reshape(len(p))
    g = np.asarray(grad(p), dtype=np.float64).reshape(p.shape)
    return MaxAffine(g, fx - np.einsum("ij,ij->i", g, p), lam)


def midpoint_grid(lo: float, hi: float, n: int) -> np.ndarray:
    """Centres of ``n`` equal cells of ``[lo, hi]``."""
    return lo + (hi - lo) * (np.arange(n) + 0.5) / n


def sup_error(f: Callable, approx: Callable, lo: float, hi: float, dense: int = 20001) -> float:
    xs = np.linspace(lo, hi, dense)[:, None]
    return float(np.max(np.abs(np.asarray(f(xs)).reshape(-1) - np.asarray(approx(xs)).reshape(-1))))


def sup_rate_check(f: Callable, grad: Callable, lo: float, hi: float, n_list,
                   lam: float | None = None, dense: int = 20001) -> list[tuple[int, float]]:
    """Sup error of the tangent construction at ``n`` equispaced cell centres, for each ``n``.

    One-dimensional boxes only; the error is measured on a dense grid.
    """
    rows = []
    for n in n_list:
        approx = tangent_construction(f, grad, midpoint_grid(lo, hi, int(n)), lam)
        rows.append((int(n), sup_error(f, approx, lo, hi, dense)))
    return rows


def rate_ratios(rows) -> np.ndarray:
    errs = np.array([e for _, e in rows])
    return errs[:-1] / errs[1:]


@dataclass
class Quantizer:
    points: np.ndarray
    distortion: float
    """Empirical ``e_2``: root mean squared distance to the nearest point."""
    iterations: int = 0


def _nearest(sample: np.ndarray, points: np.ndarray, chunk: int = 1 << 16):
    """Index of and squared distance to the nearest point, for each sample row."""
    if points.shape[1] == 1:
        order = np.argsort(points[:, 0], kind="stable")
        sp = points[order, 0]
        mids = 0.5 * (sp[1:] + sp[:-1])
        pos = np.searchsorted(mids, sample[:, 0])
        d2 = (sample[:, 0] - sp[pos]) ** 2
        return order[pos], d2
    idx = np.empty(len(sample), dtype=np.int64)
    d2 = np.empty(len(sample))
    for s in range(0, len(sample), chunk):
        block = sample[s:s + chunk]
        dist = ((block[:, None, :] - points[None, :, :]) ** 2).sum(axis=2)
        idx[s:s + chunk] = dist.argmin(axis=1)
        d2[s:s + chunk] = dist[np.arange(len(block)), idx[s:s + chunk]]
    return idx, d2


def lloyd(sample, n: int, max_iter: int = 200, tol: float = 1e-10) -> Quantizer:
    """Lloyd iterations on an empirical sample, started from its quantiles.

    An empty cell is re-seeded at the sample point farthest from the
    current points.
    """
    x = _as_points(sample)
    size = len(x)
    if not 1 <= n <= size:
        raise ValueError("need 1 <= n <= sample size")
    ranks = ((np.arange(n) + 0.5) * size / n).astype(np.int64)
    order = np.argsort(x[:, 0], kind="stable")
    points = x[order[ranks]].copy()
    prev = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        idx, d2 = _nearest(x, points)
        dist = float(d2.mean())
        counts = np.bincount(idx, minlength=n)
        empty = np.flatnonzero(counts == 0)
        for j in empty:
            far = int(d2.argmax())
            points[j] = x[far]
            d2[far] = 0.0
        if empty.size:
            prev = np.inf
            continue
        points = np.stack([np.bincount(idx, weights=x[:, j], minlength=n) for j in range(x.shape[1])],
                          axis=1) / counts[:, None]
        if prev - dist <= tol * dist or dist == 0.0:
            break
        prev = dist
    _, d2 = _nearest(x, points)
    return Quantizer(points, float(np.sqrt(d2.mean())), it)


def uniform_sampler(lo: float = 0.0, hi: float = 1.0, d: int = 1):
    return lambda rng, size: rng.uniform(lo, hi, size=(size, d))


def quantization_error(sampler: Callable, n: int, sample_size: int, seed: int = 0,
                       max_iter: int = 200, tol: float = 1e-10) -> Quantizer:
    """Estimate the optimal ``n``-point ``L^2`` quantizer of ``mu`` and its distortion ``e_2``.

    ``sampler(rng, size)`` draws ``(size, d)`` points from ``mu``.
    """
    sample = sampler(np.random.default_rng([seed, 0]), sample_size)
    return lloyd(sample, n, max_iter, tol)


@dataclass
class BoundCheck:
    n: int
    lhs: float
    lhs_se: float
    rhs: float
    e2: float

    def holds(self, slack_se: float = 3.0) -> bool:
        return self.lhs <= self.rhs + slack_se * self.lhs_se


def lr_bound_check(f: Callable, grad: Callable, holder_const: float, alpha: float,
                   sampler: Callable, n: int, r: float = 1.0, sample_size: int = 10 ** 6,
                   seed: int = 0) -> BoundCheck:
    """Compare the ``L^r(mu)`` error of the tangent construction at a quantizer with its bound.

    The witness is the construction at the Lloyd quantizer points; its error
    is estimated on an independent sample of ``mu``.
    """
    q = quantization_error(sampler, n, sample_size, seed)
    approx = tangent_construction(f, grad, q.points)
    x = _as_points(sampler(np.random.default_rng([seed, 1]), sample_size))
    err = np.abs(np.asarray(f(x)).reshape(-1) - approx(x).reshape(-1)) ** r
    mean = float(err.mean())
    se_mean = float(err.std(ddof=1) / np.sqrt(len(err)))
    lhs = mean ** (1.0 / r)
    # delta method for the r-th root
    lhs_se = se_mean * (lhs / (r * mean) if mean > 0 else 0.0)
    rhs = holder_const * q.distortion ** (alpha + 1.0)
    return BoundCheck(n, lhs, lhs_se, rhs, q.distortion)


def write_sup_table(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n", "sup_error"])
        for n, e in rows:
            w.writerow([n, repr(float(e))])


def write_bound_table(path, checks) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n", "lhs", "rhs"])
        for c in checks:
            w.writerow([c.n, repr(c.lhs), repr(c.rhs)])
