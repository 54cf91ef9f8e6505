"""Learnable monotone scalar maps.

A map is the integral of a small positive network::

    f(a) = softplus(net(a)) - ln 2      (the shift is optional)
    z(x) = integral of f over [0, x]

``z`` is evaluated with fixed-order Gauss-Legendre quadrature on [0, x], and
its parameter gradient is obtained by differentiating under the integral,
using the same nodes. The gradient with respect to ``x`` is ``f(x)`` itself.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

LN2 = math.log(2.0)

DEFAULT_WIDTHS = (1, 16, 16, 1)
DEFAULT_ORDER = 32
MIN_ORDER = 8


def softplus(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _softplus_and_sigmoid(x):
    """softplus(x) and its derivative from one shared exp(-|x|)."""
    e = np.exp(-np.abs(x))
    sp = np.maximum(x, 0.0) + np.log1p(e)
    inv = 1.0 / (1.0 + e)
    sig = np.where(x >= 0, inv, e * inv)
    return sp, sig


@dataclass(frozen=True)
class QuadratureRule:
    """Gauss-Legendre nodes and weights on [-1, 1]."""

    nodes: np.ndarray
    weights: np.ndarray

    @property
    def order(self) -> int:
        return len(self.nodes)


@lru_cache(maxsize=None)
def gauss_legendre(order: int) -> QuadratureRule:
    if order < 1:
        raise ValueError("quadrature order must be positive")
    nodes, weights = np.polynomial.legendre.leggauss(order)
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return QuadratureRule(nodes, weights)


def _check_finite(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("input must be finite")
    return arr


def integrate(func: Callable[[np.ndarray], np.ndarray], x, order: int = DEFAULT_ORDER):
    """Integral of a vectorised ``func`` over [0, x] for scalar or array ``x``."""
    x = _check_finite(x)
    rule = gauss_legendre(order)
    xs = np.atleast_1d(x)
    pts = xs[:, None] * (0.5 * (rule.nodes + 1.0))[None, :]
    vals = np.asarray(func(pts.ravel()), dtype=np.float64).reshape(pts.shape)
    out = 0.5 * xs * (vals @ rule.weights)
    return out.reshape(x.shape) if x.ndim else float(out[0])


class ScalarNet:
    """Fully connected R -> R network with softplus hidden units.

    Parameters live in one flat vector: for each layer the weight matrix
    (out x in, row-major) followed by its bias.
    """

    def __init__(self, widths: Sequence[int] = DEFAULT_WIDTHS, theta=None):
        widths = tuple(int(w) for w in widths)
        if len(widths) < 2 or widths[0] != 1 or widths[-1] != 1 or min(widths) < 1:
            raise ValueError(f"widths must run 1 -> ... -> 1, got {widths}")
        self.widths = widths
        self._slices = []
        off = 0
        for n_in, n_out in zip(widths[:-1], widths[1:]):
            w = slice(off, off + n_out * n_in)
            off += n_out * n_in
            b = slice(off, off + n_out)
            off += n_out
            self._slices.append((w, b, n_out, n_in))
        self.n_params = off
        if theta is None:
            theta = np.zeros(off)
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (off,):
            raise ValueError(f"expected {off} parameters for widths {widths}, got {theta.shape}")
        self.theta = theta

    @classmethod
    def initialized(cls, widths: Sequence[int] = DEFAULT_WIDTHS, rng=None) -> "ScalarNet":
        """Hidden weights ~ U(+-1/sqrt(fan_in)); last layer and biases zero, so net == 0."""
        rng = np.random.default_rng(rng)
        net = cls(widths)
        theta = np.zeros(net.n_params)
        for w, _, n_out, n_in in net._slices[:-1]:
            bound = 1.0 / math.sqrt(n_in)
            theta[w] = rng.uniform(-bound, bound, size=n_out * n_in)
        net.theta = theta
        return net

    @property
    def input_weights(self) -> slice:
        """Slice of theta holding the first-layer weights; zero there means a constant net."""
        return self._slices[0][0]

    def layers(self, theta=None):
        theta = self.theta if theta is None else theta
        return [(theta[w].reshape(n_out, n_in), theta[b]) for w, b, n_out, n_in in self._slices]

    def forward(self, a):
        """Network output at points ``a`` (1-D); also returns a backprop cache."""
        h = np.asarray(a, dtype=np.float64).reshape(-1, 1)
        cache = []
        layers = self.layers()
        last = len(layers) - 1
        for i, (W, b) in enumerate(layers):
            pre = h @ W.T + b
            if i == last:
                cache.append((h, None))
                h = pre
            else:
                h_next, slope = _softplus_and_sigmoid(pre)
                cache.append((h, slope))
                h = h_next
        return h[:, 0], cache

    def backward(self, cache, grad_out) -> np.ndarray:
        """Vector-Jacobian product: sum over points of grad_out * d out / d theta."""
        grad = np.empty(self.n_params)
        layers = self.layers()
        g = np.asarray(grad_out, dtype=np.float64).reshape(-1, 1)
        for i in range(len(layers) - 1, -1, -1):
            W, _ = layers[i]
            h_in, slope = cache[i]
            if slope is not None:
                g = g * slope
            w_sl, b_sl, _, _ = self._slices[i]
            grad[w_sl] = (g.T @ h_in).ravel()
            grad[b_sl] = g.sum(axis=0)
            if i:
                g = g @ W
        return grad

    def __call__(self, a):
        return self.forward(a)[0]

    def copy(self) -> "ScalarNet":
        return ScalarNet(self.widths, self.theta.copy())


@dataclass
class MonotoneMap:
    net: ScalarNet = field(default_factory=ScalarNet)
    quadrature_order: int = DEFAULT_ORDER
    bias_enabled: bool = True
    integrand: Callable[[np.ndarray], np.ndarray] | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.quadrature_order < MIN_ORDER:
            raise ValueError(f"quadrature_order must be >= {MIN_ORDER}")

    @property
    def theta(self) -> np.ndarray:
        return self.net.theta

    @theta.setter
    def theta(self, value):
        self.net.theta = np.asarray(value, dtype=np.float64)

    @property
    def rule(self) -> QuadratureRule:
        return gauss_legendre(self.quadrature_order)

    def _shift(self) -> float:
        return LN2 if self.bias_enabled else 0.0

    # f ------------------------------------------------------------------
    def f(self, a):
        a = _check_finite(a)
        if self.integrand is not None:
            return self.integrand(a)
        out = softplus(self.net(np.atleast_1d(a).ravel())) - self._shift()
        return out.reshape(a.shape) if a.ndim else float(out[0])

    def f_with_vjp(self, a):
        """``f`` at 1-D points plus a function mapping upstream grads to d theta."""
        out, cache = self.net.forward(a)
        f, dsoft = _softplus_and_sigmoid(out)
        f = f - self._shift()

        def vjp(g):
            return self.net.backward(cache, np.asarray(g) * dsoft)

        return f, vjp

    # z ------------------------------------------------------------------
    def z(self, x):
        if self.integrand is not None:
            return integrate(self.integrand, x, self.quadrature_order)
        x = _check_finite(x)
        out, _ = self.z_with_vjp(np.atleast_1d(x).ravel())
        return out.reshape(x.shape) if x.ndim else float(out[0])

    def z_with_vjp(self, x: np.ndarray):
        """z at 1-D points ``x`` and a closure giving sum_m g_m * dz(x_m)/d theta."""
        rule = self.rule
        half = 0.5 * (rule.nodes + 1.0)
        pts = x[:, None] * half[None, :]
        f, f_vjp = self.f_with_vjp(pts.ravel())
        f = f.reshape(pts.shape)
        z = 0.5 * x * (f @ rule.weights)

        def vjp(g):
            up = (0.5 * np.asarray(g) * x)[:, None] * rule.weights[None, :]
            return f_vjp(up.ravel())

        return z, vjp

    def grad_params(self, x):
        """dz/d theta; shape ``(n_params,)`` for scalar x, ``(len(x), n_params)`` otherwise."""
        x = _check_finite(x)
        xs = np.atleast_1d(x).ravel()
        rows = []
        for xi in xs:
            _, vjp = self.z_with_vjp(np.array([xi]))
            rows.append(vjp(np.ones(1)))
        out = np.array(rows)
        return out[0] if x.ndim == 0 else out

    def grad_input(self, x):
        return self.f(x)

    def copy(self) -> "MonotoneMap":
        return MonotoneMap(self.net.copy(), self.quadrature_order, self.bias_enabled, self.integrand)

    def to_json(self) -> dict:
        return {
            "widths": list(self.net.widths),
            "theta": self.net.theta.tolist(),
            "bias_enabled": self.bias_enabled,
            "quadrature_order": self.quadrature_order,
        }

    @classmethod
    def from_json(cls, obj) -> "MonotoneMap":
        return cls(
            ScalarNet(obj["widths"], obj["theta"]),
            int(obj["quadrature_order"]),
            bool(obj["bias_enabled"]),
        )

    @classmethod
    def initialized(
        cls,
        widths: Sequence[int] = DEFAULT_WIDTHS,
        rng=None,
        quadrature_order: int = DEFAULT_ORDER,
        bias_enabled: bool = True,
    ) -> "MonotoneMap":
        return cls(ScalarNet.initialized(widths, rng), quadrature_order, bias_enabled)


def f_eval(m: MonotoneMap, a):
    return m.f(a)


def z_eval(m: MonotoneMap, x):
    return m.z(x)


def z_grad_params(m: MonotoneMap, x):
    return m.grad_params(x)


def z_grad_input(m: MonotoneMap, x):
    return m.grad_input(x)
