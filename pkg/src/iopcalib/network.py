"""Plain-numpy neural network machinery.

Two building blocks live here. First, a small multi-layer perceptron with
rectifier hidden units and an optional softplus applied to selected output
coordinates; forward and reverse passes are hand-coded so the calibrators get
exact analytic gradients without an autodiff dependency. Second, a monotone
scalar function built by integrating a strictly positive derivative network
with Clenshaw-Curtis quadrature.

Parameters are always carried as one flat float64 vector holding, per layer,
the weight matrix (fan_in x fan_out, row-major) followed by the bias.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .exceptions import InvalidConfigError, InvalidParameterError

__all__ = [
    "MlpSpec",
    "MonotoneNetSpec",
    "softplus",
    "softplus_inverse",
    "sigmoid",
    "init_mlp_params",
    "mlp_forward",
    "mlp_backward",
    "clenshaw_curtis",
    "monotone_eval",
    "monotone_eval_batch",
    "monotone_backward_batch",
]

# Strictly positive floor for softplus outputs. Mathematically softplus > 0
# everywhere, but exp underflows to 0.0 below roughly -745; the floor keeps
# the "strictly positive" contract true in floating point as well.
_POSITIVE_FLOOR = 1e-300

# Rows of node evaluations processed per chunk in the monotone-net batch
# paths, to bound peak memory at wide quadrature grids.
_CHUNK_ROWS = 262144


def softplus(a):
    """Numerically stable ``log(1 + exp(a))``, floored to stay positive."""
    a = np.asarray(a, dtype=np.float64)
    out = np.maximum(a, 0.0) + np.log1p(np.exp(-np.abs(a)))
    return np.maximum(out, _POSITIVE_FLOOR)


def softplus_inverse(y):
    """Inverse of softplus for y > 0: ``log(exp(y) - 1)``."""
    y = np.asarray(y, dtype=np.float64)
    if np.any(y <= 0):
        raise InvalidParameterError("softplus_inverse requires y > 0")
    # log(exp(y) - 1) = y + log(1 - exp(-y)), stable for large y.
    return y + np.log(-np.expm1(-y))


def sigmoid(a):
    """Numerically stable logistic function."""
    a = np.asarray(a, dtype=np.float64)
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


@dataclass(frozen=True)
class MlpSpec:
    """Architecture of a fully connected network.

    Attributes
    ----------
    widths : tuple of int
        Layer widths from input to output, length >= 2. Hidden layers use
        rectifier activations; the output layer is affine.
    positive_outputs : tuple of bool
        Per-output flag, length ``widths[-1]``. Flagged coordinates pass
        through softplus and are therefore strictly positive; the rest are
        returned raw.
    """

    widths: tuple
    positive_outputs: tuple

    def __post_init__(self):
        if len(self.widths) < 2:
            raise InvalidConfigError("widths must list input and output sizes")
        if any(int(w) <= 0 for w in self.widths):
            raise InvalidConfigError(f"widths must be positive, got {self.widths}")
        if len(self.positive_outputs) != self.widths[-1]:
            raise InvalidConfigError(
                f"positive_outputs has length {len(self.positive_outputs)}, "
                f"expected {self.widths[-1]}"
            )

    @property
    def n_inputs(self):
        return self.widths[0]

    @property
    def n_outputs(self):
        return self.widths[-1]

    def param_count(self):
        return sum(
            fi * fo + fo for fi, fo in zip(self.widths[:-1], self.widths[1:])
        )

    def to_dict(self):
        return {
            "widths": list(self.widths),
            "positive_outputs": [bool(p) for p in self.positive_outputs],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            widths=tuple(int(w) for w in d["widths"]),
            positive_outputs=tuple(bool(p) for p in d["positive_outputs"]),
        )


def _check_params(spec, params):
    params = np.asarray(params, dtype=np.float64)
    if params.ndim != 1 or params.shape[0] != spec.param_count():
        raise InvalidParameterError(
            f"expected {spec.param_count()} parameters, got shape {params.shape}"
        )
    if not np.all(np.isfinite(params)):
        raise InvalidParameterError("parameters contain non-finite values")
    return params


def unpack_mlp_params(spec, params):
    """Split a flat parameter vector into per-layer (W, b) views."""
    params = _check_params(spec, params)
    layers = []
    off = 0
    for fi, fo in zip(spec.widths[:-1], spec.widths[1:]):
        W = params[off : off + fi * fo].reshape(fi, fo)
        off += fi * fo
        b = params[off : off + fo]
        off += fo
        layers.append((W, b))
    return layers


def init_mlp_params(spec, rng):
    """Symmetric uniform init scaled by fan-in, like a stack of dense layers."""
    parts = []
    for fi, fo in zip(spec.widths[:-1], spec.widths[1:]):
        bound = 1.0 / np.sqrt(fi)
        parts.append(rng.uniform(-bound, bound, size=fi * fo))
        parts.append(rng.uniform(-bound, bound, size=fo))
    return np.concatenate(parts)


def _forward_cached(spec, params, X):
    layers = unpack_mlp_params(spec, params)
    acts = [X]
    H = X
    for W, b in layers[:-1]:
        H = H @ W
        H += b
        np.maximum(H, 0.0, out=H)
        acts.append(H)
    W, b = layers[-1]
    Z = H @ W
    Z += b
    mask = np.asarray(spec.positive_outputs, dtype=bool)
    if mask.any():
        out = Z.copy()
        out[:, mask] = softplus(Z[:, mask])
    else:
        out = Z
    return out, (layers, acts, Z, mask)


def mlp_forward(spec, params, X, cache=False):
    """Evaluate the network on an N x n_inputs batch.

    Returns the N x n_outputs array, or ``(out, ctx)`` when ``cache`` is true;
    ``ctx`` feeds :func:`mlp_backward`.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != spec.n_inputs:
        raise InvalidParameterError(
            f"input must have shape (N, {spec.n_inputs}), got {X.shape}"
        )
    out, ctx = _forward_cached(spec, params, X)
    return (out, ctx) if cache else out


def mlp_backward(spec, ctx, grad_out):
    """Gradient of ``sum(grad_out * output)`` with respect to the flat params.

    ``ctx`` is the cache from ``mlp_forward(..., cache=True)`` and
    ``grad_out`` has the output's shape. Rectifier and softplus subgradients
    at their kinks are taken as 0 and 1/2-free respectively (the softplus
    derivative is the logistic function, smooth everywhere).
    """
    layers, acts, Z, mask = ctx
    if mask.any():
        dZ = np.array(grad_out, dtype=np.float64, copy=True)
        dZ[:, mask] *= sigmoid(Z[:, mask])
    else:
        dZ = np.asarray(grad_out, dtype=np.float64)
    grads = [None] * len(layers)
    W, _ = layers[-1]
    grads[-1] = (acts[-1].T @ dZ, dZ.sum(axis=0))
    dH = dZ @ W.T
    for li in range(len(layers) - 2, -1, -1):
        dPre = dH
        dPre *= acts[li + 1] > 0.0
        W, _ = layers[li]
        grads[li] = (acts[li].T @ dPre, dPre.sum(axis=0))
        dH = dPre @ W.T
    return np.concatenate([np.concatenate([g.ravel(), b]) for g, b in grads])


@lru_cache(maxsize=None)
def clenshaw_curtis(num_points):
    """Clenshaw-Curtis nodes and weights on [-1, 1].

    Nodes are ``cos(pi * k / (num_points - 1))`` for k = 0..num_points-1
    (descending) and the weights integrate polynomials of degree
    ``num_points - 1`` exactly. Requires ``num_points >= 2``.
    """
    if num_points < 2:
        raise InvalidConfigError("quadrature needs at least 2 points")
    N = num_points - 1
    k = np.arange(num_points)
    nodes = np.cos(np.pi * k / N)
    j = np.arange(1, N // 2 + 1)
    if j.size:
        b = np.where(2 * j == N, 1.0, 2.0)
        cosines = np.cos(2.0 * np.pi * np.outer(k, j) / N)
        series = cosines @ (b / (4.0 * j**2 - 1.0))
    else:
        series = np.zeros(num_points)
    c = np.where((k == 0) | (k == N), 1.0, 2.0)
    weights = c / N * (1.0 - series)
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return nodes, weights


@dataclass(frozen=True)
class MonotoneNetSpec:
    """A strictly increasing scalar map defined through its derivative.

    The map is ``f(x) = bias + integral of d(t) dt from 0 to x`` where ``d``
    is a scalar network with a strictly positive (softplus) output. The
    integral is approximated with ``quadrature_points`` Clenshaw-Curtis nodes
    scaled onto [0, x]; the same rule handles negative x because the interval
    scaling carries the sign. The trainable bias is stored as the last entry
    of the parameter vector, after the derivative net's parameters.
    """

    derivative_net: MlpSpec
    quadrature_points: int = 50

    def __post_init__(self):
        net = self.derivative_net
        if net.n_inputs != 1 or net.n_outputs != 1:
            raise InvalidConfigError(
                "derivative net must map one scalar to one scalar"
            )
        if not all(net.positive_outputs):
            raise InvalidConfigError("derivative net output must be positive")
        if self.quadrature_points < 2:
            raise InvalidConfigError("quadrature_points must be at least 2")

    def param_count(self):
        return self.derivative_net.param_count() + 1

    def to_dict(self):
        return {
            "derivative_net": self.derivative_net.to_dict(),
            "quadrature_points": self.quadrature_points,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            derivative_net=MlpSpec.from_dict(d["derivative_net"]),
            quadrature_points=int(d["quadrature_points"]),
        )


def _split_monotone_params(spec, params):
    params = np.asarray(params, dtype=np.float64)
    if params.ndim != 1 or params.shape[0] != spec.param_count():
        raise InvalidParameterError(
            f"expected {spec.param_count()} parameters, got shape {params.shape}"
        )
    return params[:-1], params[-1]


def _chunk_step(q, row_size):
    """Scalars per chunk, rounded down to whole rows of the original array.

    Keeping every row of a 2-D input inside one chunk keeps the BLAS call
    geometry identical for equal values in the same row, so exactly equal
    inputs map to exactly equal outputs.
    """
    step = max(1, _CHUNK_ROWS // q)
    if row_size > 1:
        step = max(row_size, step - step % row_size)
    return step


def monotone_eval_batch(spec, params, xs):
    """Evaluate the monotone map at every scalar in ``xs`` (any shape)."""
    net_params, bias = _split_monotone_params(spec, params)
    xs = np.asarray(xs, dtype=np.float64)
    flat = xs.ravel()
    nodes, weights = clenshaw_curtis(spec.quadrature_points)
    q = spec.quadrature_points
    half = 0.5 * flat
    out = np.empty_like(flat)
    step = _chunk_step(q, xs.shape[-1] if xs.ndim >= 2 else 1)
    for lo in range(0, flat.shape[0], step):
        hi = min(lo + step, flat.shape[0])
        # t has shape (chunk, q): quadrature nodes mapped onto [0, x].
        t = half[lo:hi, None] * (nodes + 1.0)
        d = mlp_forward(spec.derivative_net, net_params, t.reshape(-1, 1))
        out[lo:hi] = half[lo:hi] * (d.reshape(hi - lo, q) @ weights)
    return (out + bias).reshape(xs.shape)


def monotone_eval(spec, params, x):
    """Evaluate the monotone map at one scalar ``x``."""
    x = float(x)
    if not np.isfinite(x):
        raise InvalidParameterError("x must be finite")
    return float(monotone_eval_batch(spec, params, np.array([x]))[0])


def monotone_backward_batch(spec, params, xs, grad_out):
    """Gradient of ``sum(grad_out * f(xs))`` with respect to the flat params.

    Differentiation passes through the quadrature rule exactly: the rule is a
    fixed weighted sum of derivative-net evaluations, so its parameter
    gradient is the same weighted sum of the net's parameter gradients. The
    bias gradient is ``sum(grad_out)``.
    """
    net_params, _ = _split_monotone_params(spec, params)
    xs = np.asarray(xs, dtype=np.float64)
    g = np.asarray(grad_out, dtype=np.float64).ravel()
    row_size = xs.shape[-1] if xs.ndim >= 2 else 1
    xs = xs.ravel()
    if g.shape != xs.shape:
        raise InvalidParameterError("grad_out must match xs elementwise")
    nodes, weights = clenshaw_curtis(spec.quadrature_points)
    q = spec.quadrature_points
    half = 0.5 * xs
    net_grad = np.zeros(spec.derivative_net.param_count())
    step = _chunk_step(q, row_size)
    for lo in range(0, xs.shape[0], step):
        hi = min(lo + step, xs.shape[0])
        t = half[lo:hi, None] * (nodes + 1.0)
        _, ctx = mlp_forward(
            spec.derivative_net, net_params, t.reshape(-1, 1), cache=True
        )
        coeff = (g[lo:hi] * half[lo:hi])[:, None] * weights
        net_grad += mlp_backward(spec.derivative_net, ctx, coeff.reshape(-1, 1))
    return np.concatenate([net_grad, [g.sum()]])
