"""Exact simulation of the correlated Black-Scholes market and the one-factor gas forward.

Randomness comes from a counter-based generator (Philox) keyed by
``(seed, stream)``. Path ``b`` always reads the same counter block, so a
path's draws do not depend on how a simulation is chunked or parallelised.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr, ndtri

_U53 = 2.0 ** -53


class ModelError(ValueError):
    """Invalid model parameters, e.g. a correlation matrix that is not PSD."""


def normals(seed: int, count: int, dim: int, stream: int = 0, start: int = 0) -> np.ndarray:
    """Standard normals of shape ``(count, dim)`` for paths ``start .. start+count-1``.

    Uniforms in (0, 1) are built from the top 53 bits of each Philox word and
    mapped through the inverse normal CDF.
    """
    blocks = -(-dim // 4)
    gen = np.random.Philox(key=[seed & 0xFFFFFFFFFFFFFFFF, stream & 0xFFFFFFFFFFFFFFFF])
    if start:
        gen.advance(start * blocks)
    raw = gen.random_raw(count * blocks * 4).reshape(count, blocks * 4)[:, :dim]
    u = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * _U53
    return ndtri(u)


def norm_cdf(x):
    return ndtr(x)


@dataclass
class PathGrid:
    times: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        if self.times.ndim != 1 or self.times.size < 1 or self.times[0] != 0.0:
            raise ValueError("time grid must start at t0 = 0")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("time grid must be strictly increasing")

    @classmethod
    def uniform(cls, T: float, N: int) -> "PathGrid":
        return cls(np.arange(N + 1) * (T / N))

    @property
    def N(self) -> int:
        return self.times.size - 1


@dataclass
class BlackScholesModel:
    """``dS^i/S^i = (r - delta_i) dt + sigma_i dW^i`` with ``d<W^i, W^j> = rho_ij dt``."""

    r: float
    sigma: np.ndarray
    delta: np.ndarray | None = None
    rho: np.ndarray | None = None

    def __post_init__(self):
        self.sigma = np.atleast_1d(np.asarray(self.sigma, dtype=np.float64))
        d = self.sigma.size
        self.delta = np.zeros(d) if self.delta is None else np.broadcast_to(
            np.asarray(self.delta, dtype=np.float64), (d,)).copy()
        self.rho = np.eye(d) if self.rho is None else np.asarray(self.rho, dtype=np.float64)
        if np.any(self.sigma <= 0):
            raise ModelError("volatilities must be positive")
        if self.rho.shape != (d, d) or not np.allclose(self.rho, self.rho.T, atol=0, rtol=0):
            raise ModelError("correlation must be a symmetric d x d matrix")
        if not np.all(np.diag(self.rho) == 1.0):
            raise ModelError("correlation must have unit diagonal")
        try:
            self.chol = np.linalg.cholesky(self.rho)
        except np.linalg.LinAlgError as exc:
            raise ModelError("correlation matrix is not positive definite") from exc

    @classmethod
    def equicorrelated(cls, r, sigma, rho: float, delta=None) -> "BlackScholesModel":
        d = np.atleast_1d(sigma).size
        corr = np.full((d, d), float(rho))
        np.fill_diagonal(corr, 1.0)
        return cls(r, sigma, delta, corr)

    @property
    def d(self) -> int:
        return self.sigma.size

    @property
    def covariance(self) -> np.ndarray:
        return np.outer(self.sigma, self.sigma) * self.rho

    def _log_step(self, z: np.ndarray, dt) -> np.ndarray:
        # z: (..., d) independent normals -> log growth over dt
        w = z @ self.chol.T
        return (self.r - self.delta - 0.5 * self.sigma ** 2) * dt + self.sigma * np.sqrt(dt) * w


def simulate_terminal(m: BlackScholesModel, s0, T: float, count: int, seed: int,
                      stream: int = 0, start: int = 0) -> np.ndarray:
    """Exact draws of ``S_T``, shape ``(count, d)``."""
    s0 = np.broadcast_to(np.asarray(s0, dtype=np.float64), (m.d,))
    if np.any(s0 <= 0):
        raise ValueError("initial prices must be positive")
    z = normals(seed, count, m.d, stream, start)
    return s0 * np.exp(m._log_step(z, T))


def simulate_paths(m: BlackScholesModel, s0, grid: PathGrid, count: int, seed: int,
                   stream: int = 0, start: int = 0) -> np.ndarray:
    """Exact paths on ``grid``, shape ``(count, N+1, d)``; ``[:, 0] == s0``."""
    s0 = np.broadcast_to(np.asarray(s0, dtype=np.float64), (m.d,))
    if np.any(s0 <= 0):
        raise ValueError("initial prices must be positive")
    N = grid.N
    z = normals(seed, count, N * m.d, stream, start).reshape(count, N, m.d)
    dt = np.diff(grid.times)[None, :, None]
    logs = np.cumsum(m._log_step(z, dt), axis=1)
    out = np.empty((count, N + 1, m.d))
    out[:, 0] = s0
    out[:, 1:] = s0 * np.exp(logs)
    return out


@dataclass
class GasForwardModel:
    """``dF_{t,T}/F_{t,T} = sigma exp(-alpha (T - t)) dW_t`` with a flat initial curve ``f0``."""

    alpha: float
    sigma: float
    f0: float

    def __post_init__(self):
        if not (self.alpha > 0 and self.sigma > 0 and self.f0 > 0):
            raise ModelError("alpha, sigma and f0 must be positive")

    def x_variance(self, t) -> np.ndarray:
        """``Var X_t`` for ``X_t = int_0^t exp(-alpha (t-s)) dW_s``."""
        return (1.0 - np.exp(-2.0 * self.alpha * np.asarray(t, dtype=np.float64))) / (2.0 * self.alpha)

    def lambda_sq(self, t) -> np.ndarray:
        return self.sigma ** 2 * self.x_variance(t)

    def spot(self, x, t) -> np.ndarray:
        """``F_t = f0 exp(sigma X_t - lambda_t^2 / 2)``."""
        return self.f0 * np.exp(self.sigma * np.asarray(x) - 0.5 * self.lambda_sq(t))


def simulate_gas_factor(m: GasForwardModel, grid: PathGrid, count: int, seed: int,
                        stream: int = 0, start: int = 0) -> np.ndarray:
    """The Gaussian factor ``X`` on the grid by its exact AR(1) recursion, ``(count, N+1)``."""
    N = grid.N
    z = normals(seed, count, N, stream, start)
    dt = np.diff(grid.times)
    decay = np.exp(-m.alpha * dt)
    sd = np.sqrt((1.0 - decay ** 2) / (2.0 * m.alpha))
    x = np.zeros((count, N + 1))
    for k in range(N):
        x[:, k + 1] = decay[k] * x[:, k] + sd[k] * z[:, k]
    return x


def simulate_gas_paths(m: GasForwardModel, grid: PathGrid, count: int, seed: int,
                       stream: int = 0, start: int = 0) -> np.ndarray:
    """Spot prices ``F_{t_k}``, shape ``(count, N+1)``; ``F_{t_0} = f0``."""
    x = simulate_gas_factor(m, grid, count, seed, stream, start)
    return m.spot(x, grid.times[None, :])


def write_paths_csv(path, paths: np.ndarray) -> None:
    """Dump ``(count, N+1[, d])`` paths as ``path_id,t_index,asset,value`` rows."""
    arr = paths[..., None] if paths.ndim == 2 else paths
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path_id", "t_index", "asset", "value"])
        for b, k, i in np.ndindex(arr.shape):
            w.writerow([b, k, i, repr(float(arr[b, k, i]))])
