"""Convex-by-construction networks.

A network stacks activation-free affine layers and reduces the last layer's
``n`` outputs with either a hard maximum or a LogSumExp. Since the stacked
affine maps compose to a single affine map, the output is a max (or smooth
max) of ``n`` hyperplanes and therefore convex in the input, whatever the
weights are.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

MAX = "max"
LOGSUMEXP = "logsumexp"
_KINDS = (MAX, LOGSUMEXP)

_MAGIC = b"CVXNET01"


class NumericOverflowError(ArithmeticError):
    """Raised when a forward pass or an update produces non-finite values."""


@dataclass
class Activation:
    """Output reduction. For LogSumExp the sharpness is ``c * lambda_tilde``."""

    kind: str = MAX
    c: float = 1.0
    lambda_tilde: float = 1.0

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown activation kind {self.kind!r}")
        if self.kind == LOGSUMEXP and not self.c > 0:
            raise ValueError("LogSumExp scale constant c must be positive")

    @property
    def lam(self) -> float:
        return self.c * self.lambda_tilde


def logsumexp(y: np.ndarray, lam: float) -> np.ndarray:
    """Smooth maximum ``log(sum(exp(lam*y)))/lam`` along the last axis, shifted form."""
    m = y.max(axis=-1)
    return m + np.log(np.exp(lam * (y - m[..., None])).sum(axis=-1)) / lam


def softmax(y: np.ndarray, lam: float) -> np.ndarray:
    z = np.exp(lam * (y - y.max(axis=-1, keepdims=True)))
    return z / z.sum(axis=-1, keepdims=True)


@dataclass
class NetGradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    lambda_tilde: float = 0.0
    input_grad: np.ndarray | None = None


@dataclass
class ConvexNet:
    """``phi(a_L o ... o a_1(x))`` with ``phi`` the max or LogSumExp.

    ``weights[l]`` has shape ``(q_l, q_{l-1})`` and ``biases[l]`` shape
    ``(q_l,)``; the input width is ``weights[0].shape[1]``.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: Activation = field(default_factory=Activation)

    def __post_init__(self):
        if len(self.weights) < 1 or len(self.weights) != len(self.biases):
            raise ValueError("need L >= 1 layers with one bias per weight matrix")
        self.weights = [np.array(w, dtype=np.float64, ndmin=2) for w in self.weights]
        self.biases = [np.array(b, dtype=np.float64, ndmin=1) for b in self.biases]
        prev = self.weights[0].shape[1]
        for w, b in zip(self.weights, self.biases):
            if w.ndim != 2 or w.shape[1] != prev or b.shape != (w.shape[0],):
                raise ValueError("layer shapes do not chain")
            prev = w.shape[0]

    @classmethod
    def init(cls, d: int, n: int, layers: int = 1, kind: str = MAX, c: float = 1.0,
             rng: np.random.Generator | int | None = 0) -> "ConvexNet":
        """Glorot-uniform weights, zero biases, ``lambda_tilde = 1``."""
        rng = np.random.default_rng(rng)
        weights, biases = [], []
        fan_in = d
        for _ in range(layers):
            limit = np.sqrt(6.0 / (fan_in + n))
            weights.append(rng.uniform(-limit, limit, size=(n, fan_in)))
            biases.append(np.zeros(n))
            fan_in = n
        return cls(weights, biases, Activation(kind, c, 1.0))

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def width(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def depth(self) -> int:
        return len(self.weights)

    def copy(self) -> "ConvexNet":
        a = self.activation
        return ConvexNet([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                         Activation(a.kind, a.c, a.lambda_tilde))

    def _as_batch(self, x) -> tuple[np.ndarray, bool]:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        xb = x[None, :] if single else x
        if xb.ndim != 2 or xb.shape[1] != self.input_dim:
            raise ValueError(f"expected input of width {self.input_dim}, got shape {x.shape}")
        return xb, single

    def pre_activations(self, x) -> np.ndarray:
        """The ``n`` hyperplane values, shape ``(B, n)``."""
        h, _ = self._as_batch(x)
        w_eff, b_eff = self.collapse_to_affine()
        return h @ w_eff.T + b_eff

    def reduce(self, y: np.ndarray) -> np.ndarray:
        if self.activation.kind == MAX:
            return y.max(axis=-1)
        return logsumexp(y, self.activation.lam)

    def forward(self, x):
        """Evaluate the net on one input ``(d,)`` or a batch ``(B, d)``."""
        xb, single = self._as_batch(x)
        with np.errstate(over="ignore", invalid="ignore"):
            out = self.reduce(self.pre_activations(xb))
        if not np.all(np.isfinite(out)):
            raise NumericOverflowError("non-finite network output")
        return float(out[0]) if single else out

    __call__ = forward

    def collapse_to_affine(self) -> tuple[np.ndarray, np.ndarray]:
        """Effective ``(W, b)`` with ``forward(x) == phi(W x + b)``."""
        prefixes = _affine_prefixes(self.weights, self.biases)
        return prefixes[-1]

    def collapsed(self) -> "ConvexNet":
        """Single-layer net computing the same function; cheap for large batches."""
        w, b = self.collapse_to_affine()
        a = self.activation
        return ConvexNet([w], [b], Activation(a.kind, a.c, a.lambda_tilde))

    def _output_weights(self, y: np.ndarray) -> np.ndarray:
        # d(phi)/dy: one-hot argmax (lowest index on ties) or softmax.
        if self.activation.kind == MAX:
            p = np.zeros_like(y)
            p[np.arange(y.shape[0]), tie_argmax(y)] = 1.0
            return p
        return softmax(y, self.activation.lam)

    def input_subgradient(self, x) -> np.ndarray:
        """Subgradient in ``x``: the argmax hyperplane (Max) or exact gradient (LogSumExp)."""
        xb, single = self._as_batch(x)
        w_eff, _ = self.collapse_to_affine()
        g = self._output_weights(self.pre_activations(xb)) @ w_eff
        return g[0] if single else g

    def backward(self, x, upstream) -> NetGradients:
        """Parameter and input gradients of ``sum_b upstream_b * f(x_b)``."""
        return self.forward_backward(x, lambda out: upstream)[1]

    def forward_backward(self, x, upstream_fn) -> tuple[np.ndarray, NetGradients]:
        """Outputs ``f(x_b)`` and the gradients of ``sum_b u_b f(x_b)`` with ``u = upstream_fn(f(x))``.

        One pass serves both, which halves the cost of a training step.
        """
        xb, single = self._as_batch(x)
        with np.errstate(over="ignore", invalid="ignore"):
            prefixes = _affine_prefixes(self.weights, self.biases)
            w_eff, b_eff = prefixes[-1]
            y = xb @ w_eff.T + b_eff
            phi, p = _reduce_with_weights(y, self.activation.kind, self.activation.lam)
        if not np.all(np.isfinite(phi)):
            raise NumericOverflowError("non-finite network output")
        u = np.broadcast_to(np.asarray(upstream_fn(phi), dtype=np.float64), (xb.shape[0],))
        lt_grad = 0.0
        if self.activation.kind == LOGSUMEXP:
            lam = self.activation.lam
            dphi_dlam = (np.einsum("ij,ij->i", p, y) - phi) / lam
            lt_grad = float(self.activation.c * (u @ dphi_dlam))
        g = p
        with np.errstate(invalid="ignore", over="ignore"):
            g *= u[:, None]
        gw, gb = _affine_chain_grads(self.weights, prefixes, g.T @ xb, g.sum(axis=0))
        grads = NetGradients(gw, gb, lt_grad, (g @ w_eff)[0] if single else g @ w_eff)
        return (float(phi[0]) if single else phi), grads

    def activated_hyperplanes(self, xs, tol: float = 0.0) -> set[int]:
        """Indices of hyperplanes reaching the max (within ``tol``) on some input."""
        y = self.pre_activations(xs)
        hit = y >= y.max(axis=1, keepdims=True) - tol
        return set(np.flatnonzero(hit.any(axis=0)).tolist())

    def parameters(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases]

    # -- serialization --------------------------------------------------

    def to_bytes(self) -> bytes:
        a = self.activation
        header = {
            "L": self.depth, "n": self.width, "d": self.input_dim, "kind": a.kind,
            "c": float(a.c).hex(),
            "lambda_tilde": float(a.lambda_tilde).hex(),
            "shapes": [list(w.shape) for w in self.weights],
        }
        raw = json.dumps(header).encode()
        buf = io.BytesIO()
        buf.write(_MAGIC)
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        for w, b in zip(self.weights, self.biases):
            buf.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
            buf.write(np.ascontiguousarray(b, dtype="<f8").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "ConvexNet":
        if data[:8] != _MAGIC:
            raise ValueError("not a serialized ConvexNet")
        (hlen,) = struct.unpack("<I", data[8:12])
        header = json.loads(data[12:12 + hlen])
        off = 12 + hlen
        weights, biases = [], []
        for rows, cols in header["shapes"]:
            w = np.frombuffer(data, dtype="<f8", count=rows * cols, offset=off).reshape(rows, cols)
            off += 8 * rows * cols
            b = np.frombuffer(data, dtype="<f8", count=rows, offset=off)
            off += 8 * rows
            weights.append(w.astype(np.float64))
            biases.append(b.astype(np.float64))
        act = Activation(header["kind"], float.fromhex(header["c"]),
                         float.fromhex(header["lambda_tilde"]))
        return cls(weights, biases, act)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ConvexNet":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def tie_argmax(y: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Argmax along the last axis; values within ``tol * (1 + |max|)`` of the max count as ties (lowest index wins)."""
    m = y.max(axis=-1, keepdims=True)
    return (y >= m - tol * (1.0 + np.abs(m))).argmax(axis=-1)


def _reduce_with_weights(y: np.ndarray, kind: str, lam):
    """``phi(y)`` along the last axis and its gradient ``d phi / d y``."""
    if kind == MAX:
        p = np.zeros_like(y)
        np.put_along_axis(p, tie_argmax(y)[..., None], 1.0, axis=-1)
        return y.max(axis=-1), p
    m = y.max(axis=-1, keepdims=True)
    z = y - m
    z *= lam
    np.exp(z, out=z)
    s = z.sum(axis=-1, keepdims=True)
    z /= s
    return (m + np.log(s) / lam)[..., 0], z


def _affine_prefixes(weights, biases) -> list[tuple[np.ndarray, np.ndarray]]:
    """``(A_l, c_l)`` with layer ``l``'s input equal to ``A_l x + c_l``; the last entry is the full map.

    Works on single nets and on stacks with a leading axis.
    """
    d = weights[0].shape[-1]
    lead = weights[0].shape[:-2]
    a = np.broadcast_to(np.eye(d), lead + (d, d))
    c = np.zeros(lead + (d,))
    out = [(a, c)]
    for w, b in zip(weights, biases):
        a = w if len(out) == 1 else np.matmul(w, a)
        c = b if len(out) == 1 else np.matmul(w, c[..., None])[..., 0] + b
        out.append((a, c))
    return out


def _affine_chain_grads(weights, prefixes, sx: np.ndarray, s1: np.ndarray):
    """Weight and bias gradients of stacked affine layers.

    ``sx = G^T x`` and ``s1 = G^T 1`` where ``G`` holds the output-side
    gradients per sample. Since every layer is affine, layer ``l``'s weight
    gradient is ``P_l^T [sx A_l^T + s1 c_l^T]`` with ``P_l`` the product of
    the layers above it, so the batch is touched only once.
    """
    depth = len(weights)
    gw, gb = [None] * depth, [None] * depth
    gx, g1 = sx, s1
    for layer in range(depth - 1, -1, -1):
        a, c = prefixes[layer]
        if layer == 0:
            gw[layer] = gx
        else:
            gw[layer] = np.matmul(gx, np.swapaxes(a, -1, -2)) + g1[..., :, None] * c[..., None, :]
        gb[layer] = g1
        if layer:
            wt = np.swapaxes(weights[layer], -1, -2)
            gx = np.matmul(wt, gx)
            g1 = np.matmul(wt, g1[..., None])[..., 0]
    return gw, gb


def convexity_midpoint_check(f, trials: int, box: tuple, rel_tol: float = 1e-9,
                             rng: np.random.Generator | int | None = 0) -> tuple[bool, float]:
    """Sample ``(x, y, t)`` in ``box`` and test ``f(tx+(1-t)y) <= t f(x)+(1-t) f(y)``.

    ``f`` maps a batch ``(B, d)`` to ``(B,)``; ``box`` is ``(lo, hi)`` arrays.
    Returns ``(passed, worst)`` where ``worst`` is the largest normalized
    violation ``(lhs - rhs) / (1 + |rhs|)``. A non-finite evaluation raises
    :class:`NumericOverflowError` rather than producing a verdict.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(rng)
    lo, hi = (np.atleast_1d(np.asarray(v, dtype=np.float64)) for v in box)
    x = rng.uniform(lo, hi, size=(trials, lo.size))
    y = rng.uniform(lo, hi, size=(trials, lo.size))
    t = rng.uniform(size=(trials, 1))
    with np.errstate(all="ignore"):
        lhs = np.asarray(f(t * x + (1 - t) * y), dtype=np.float64)
        rhs = t[:, 0] * np.asarray(f(x)) + (1 - t[:, 0]) * np.asarray(f(y))
    if not (np.all(np.isfinite(lhs)) and np.all(np.isfinite(rhs))):
        raise NumericOverflowError("non-finite value during convexity check")
    excess = (lhs - rhs) / (1.0 + np.abs(rhs))
    worst = float(excess.max())
    return worst <= rel_tol, worst


@dataclass
class ScaledNet:
    """A net behind an affine input map to ``[0, 1]^d`` and a positive output scale.

    ``value(s) = out_shift + out_scale * net((s - lo) / (hi - lo))``. Both maps
    are affine with positive slopes, so convexity in ``s`` is preserved.
    """

    net: ConvexNet
    lo: np.ndarray
    hi: np.ndarray
    out_shift: float = 0.0
    out_scale: float = 1.0

    def __post_init__(self):
        self.lo = np.atleast_1d(np.asarray(self.lo, dtype=np.float64))
        self.hi = np.atleast_1d(np.asarray(self.hi, dtype=np.float64))
        if np.any(self.hi <= self.lo):
            raise ValueError("input box must have hi > lo")
        if not self.out_scale > 0:
            raise ValueError("output scale must be positive")

    def scale_inputs(self, s) -> np.ndarray:
        return (np.asarray(s, dtype=np.float64) - self.lo) / (self.hi - self.lo)

    def scale_targets(self, t) -> np.ndarray:
        return (np.asarray(t, dtype=np.float64) - self.out_shift) / self.out_scale

    def __call__(self, s):
        return self.out_shift + self.out_scale * self.net.forward(self.scale_inputs(s))

    def gradient(self, s) -> np.ndarray:
        """Input (sub)gradient in original units, e.g. a delta."""
        g = self.net.input_subgradient(self.scale_inputs(s))
        return self.out_scale * g / (self.hi - self.lo)

    def copy(self) -> "ScaledNet":
        return ScaledNet(self.net.copy(), self.lo.copy(), self.hi.copy(), self.out_shift, self.out_scale)

    def collapsed(self) -> "ScaledNet":
        return ScaledNet(self.net.collapsed(), self.lo, self.hi, self.out_shift, self.out_scale)


def architecture(name: str) -> tuple[int, str]:
    """Map ``LM``, ``L2SE``, ``k-SLM``, ``k-SL2SE`` to ``(layers, kind)``."""
    key = name.strip().upper()
    if key == "LM":
        return 1, MAX
    if key == "L2SE":
        return 1, LOGSUMEXP
    head, _, tail = key.partition("-")
    if tail in ("SLM", "SL2SE") and head.isdigit() and int(head) >= 1:
        return int(head), MAX if tail == "SLM" else LOGSUMEXP
    raise ValueError(f"unknown architecture {name!r}")


def build(arch: str, d: int, n: int, c: float = 1.0, rng=0) -> ConvexNet:
    layers, kind = architecture(arch)
    return ConvexNet.init(d, n, layers, kind, c, rng)


@dataclass
class NetConfig:
    arch: str = "2-SL2SE"
    n: int = 32
    c: float = 20.0
    seed: int = 0

    def __post_init__(self):
        architecture(self.arch)
        if self.n < 1:
            raise ValueError("width n must be >= 1")

    def build(self, d: int, seed: int | None = None) -> ConvexNet:
        return build(self.arch, d, self.n, self.c, self.seed if seed is None else seed)


class NetStack:
    """``G`` same-shaped nets evaluated and trained side by side.

    Parameters carry a leading axis of length ``G``; inputs are ``(G, B, d)``
    or a shared ``(B, d)`` batch.
    """

    def __init__(self, nets: Sequence[ConvexNet]):
        if not nets:
            raise ValueError("empty stack")
        first = nets[0]
        self.kind = first.activation.kind
        self.c = float(first.activation.c)
        for net in nets:
            if net.activation.kind != self.kind or net.activation.c != self.c:
                raise ValueError("stacked nets must share activation kind and c")
            if [w.shape for w in net.weights] != [w.shape for w in first.weights]:
                raise ValueError("stacked nets must share layer shapes")
        self.weights = [np.stack([net.weights[i] for net in nets]) for i in range(first.depth)]
        self.biases = [np.stack([net.biases[i] for net in nets]) for i in range(first.depth)]
        self.lambda_tilde = np.array([net.activation.lambda_tilde for net in nets], dtype=np.float64)

    def __len__(self) -> int:
        return self.weights[0].shape[0]

    @property
    def lam(self) -> np.ndarray:
        return self.c * self.lambda_tilde

    def _inputs(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return np.broadcast_to(x, (len(self),) + x.shape) if x.ndim == 2 else x

    def _pre(self, x, prefixes) -> np.ndarray:
        w_eff, b_eff = prefixes[-1]
        return np.matmul(x, np.swapaxes(w_eff, 1, 2)) + b_eff[:, None, :]

    def forward(self, x) -> np.ndarray:
        with np.errstate(over="ignore", invalid="ignore"):
            prefixes = _affine_prefixes(self.weights, self.biases)
            out, _ = _reduce_with_weights(self._pre(self._inputs(x), prefixes), self.kind,
                                          self.lam[:, None, None])
        if not np.all(np.isfinite(out)):
            raise NumericOverflowError("non-finite network output")
        return out

    __call__ = forward

    def forward_backward(self, x, upstream_fn) -> tuple[np.ndarray, list[np.ndarray], np.ndarray]:
        """Outputs and gradients of ``sum_b u[g, b] * f_g(x_gb)`` with ``u = upstream_fn(outputs)``.

        Returns ``(outputs, grads, lambda_tilde_grad)`` with ``grads``
        ordered like :meth:`parameters`.
        """
        xs = self._inputs(x)
        with np.errstate(over="ignore", invalid="ignore"):
            prefixes = _affine_prefixes(self.weights, self.biases)
            y = self._pre(xs, prefixes)
            phi, p = _reduce_with_weights(y, self.kind, self.lam[:, None, None])
        if not np.all(np.isfinite(phi)):
            raise NumericOverflowError("non-finite network output")
        u = np.asarray(upstream_fn(phi), dtype=np.float64)
        lt_grad = np.zeros(len(self))
        if self.kind == LOGSUMEXP:
            dphi = (np.einsum("gbi,gbi->gb", p, y) - phi) / self.lam[:, None]
            lt_grad = self.c * (u * dphi).sum(axis=1)
        g = p
        g *= u[..., None]
        gw, gb = _affine_chain_grads(self.weights, prefixes, np.matmul(np.swapaxes(g, 1, 2), xs),
                                     g.sum(axis=1))
        return phi, [*gw, *gb], lt_grad

    def backward(self, x, upstream) -> tuple[list[np.ndarray], np.ndarray]:
        """Gradients of ``sum_b upstream[g, b] * f_g(x_gb)`` for every net ``g``."""
        _, grads, lt = self.forward_backward(x, lambda out: upstream)
        return grads, lt

    def parameters(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases]

    def unstack(self) -> list[ConvexNet]:
        return [
            ConvexNet([w[g].copy() for w in self.weights], [b[g].copy() for b in self.biases],
                      Activation(self.kind, self.c, float(self.lambda_tilde[g])))
            for g in range(len(self))
        ]
