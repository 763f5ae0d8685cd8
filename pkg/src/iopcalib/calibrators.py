"""Calibration maps over logits, packaged as sklearn-style estimators.

Every calibrator is a map f from logit vectors to logit vectors, trained
post hoc on a held-out set. The families:

``TemperatureScaling``
    f(x) = x / t with one positive temperature.
``MatrixScaling``
    f(x) = W x + b.
``DirichletScaling``
    f(x) = W log_softmax(x) + b.
``DiagonalCalibrator``
    Applies one shared strictly increasing scalar map to every coordinate,
    built by integrating a positive derivative network.
``OrderPreservingCalibrator``
    Intra order-preserving map: each output ranks its coordinates exactly
    like its input, so top-k predictions and accuracy are untouched while
    the map itself can be an arbitrary continuous function of the whole
    logit vector.
``OrderInvariantCalibrator``
    Same family restricted to order-invariant maps: the increment network
    sees only the sorted logits, so permuting the input permutes the output.
``UnconstrainedCalibrator``
    A plain MLP on logits, kept as an ablation; it preserves nothing.

The intra order-preserving construction sorts x descending into y, builds
increments w_i = |y_i - y_{i+1}| * m_i(x) for i < n from a strictly positive
network m, closes with w_n = m_n(x) * y_n, and scatters the suffix sums of w
back through the inverse sort. Zero gaps in y force zero increments, so
exact ties are preserved exactly, and positive gaps get positive increments,
so strict orders are preserved too.

Estimators follow the usual protocol: hyperparameters in ``__init__``,
``fit(X, y)`` learns parameters into ``params_``, then ``transform`` returns
calibrated logits and ``predict_proba`` their softmax.
"""

from __future__ import annotations

import numpy as np
from scipy.special import log_softmax, softmax
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import InvalidInputError, InvalidParameterError
from .network import (
    MlpSpec,
    MonotoneNetSpec,
    clenshaw_curtis,
    init_mlp_params,
    mlp_backward,
    mlp_forward,
    monotone_backward_batch,
    monotone_eval_batch,
    softplus_inverse,
)
from .ordering import argsort_descending, reverse_cumsum
from .validation import as_matrix, as_vector, check_logits_labels

__all__ = [
    "temperature_scale",
    "matrix_scale",
    "dirichlet_scale",
    "off_diagonal_penalty",
    "intra_op_forward",
    "TemperatureScaling",
    "MatrixScaling",
    "DirichletScaling",
    "DiagonalCalibrator",
    "OrderInvariantCalibrator",
    "OrderPreservingCalibrator",
    "UnconstrainedCalibrator",
    "METHODS",
]

# Cap on derivative-net rows evaluated per chunk in the fused diagonal
# objective; keeps peak memory near tens of megabytes.
_FUSED_CHUNK = 262144


# ---------------------------------------------------------------------------
# Forward maps as plain functions.


def temperature_scale(X, t):
    """Scale logits by a positive temperature: ``X / t``."""
    t = float(t)
    if not np.isfinite(t) or t <= 0:
        raise InvalidParameterError(f"temperature must be positive, got {t!r}")
    return as_matrix(X, name="X") / t


def matrix_scale(X, W, b):
    """Affine map on logits: row-wise ``W x + b``."""
    X = as_matrix(X, name="X")
    W = np.asarray(W, dtype=np.float64)
    b = as_vector(b, name="b")
    n = X.shape[1]
    if W.shape != (n, n):
        raise InvalidParameterError(f"W must have shape {(n, n)}, got {W.shape}")
    if not np.all(np.isfinite(W)):
        raise InvalidParameterError("W contains non-finite values")
    if b.shape[0] != n:
        raise InvalidParameterError(f"b must have length {n}, got {b.shape[0]}")
    return X @ W.T + b


def dirichlet_scale(X, W, b):
    """Affine map on log-probabilities: ``W log_softmax(x) + b``."""
    X = as_matrix(X, name="X")
    return matrix_scale(log_softmax(X, axis=1), W, b)


def off_diagonal_penalty(W, b, lam_od, lam_b):
    """Regularizer ``lam_od * sum_{i != j} W_ij^2 + lam_b * sum_i b_i^2``.

    Diagonal entries of W are free, so the penalty pulls toward a
    temperature-like map without shrinking the per-class scale.
    """
    W = np.asarray(W, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        raise InvalidParameterError(f"W must be square, got shape {W.shape}")
    if b.ndim != 1 or b.shape[0] != W.shape[0]:
        raise InvalidParameterError(
            f"b must have length {W.shape[0]}, got shape {b.shape}"
        )
    if lam_od < 0 or lam_b < 0:
        raise InvalidParameterError("penalty weights must be non-negative")
    off = np.sum(W**2) - np.sum(np.diag(W) ** 2)
    return float(lam_od * off + lam_b * np.sum(b**2))


def intra_op_forward(mlp_spec, params, X, sorted_input=False):
    """Intra order-preserving forward pass for a batch of logit rows.

    ``mlp_spec`` must map n inputs to n outputs with the first n - 1 outputs
    positive. With ``sorted_input`` the increment net sees the sorted logits
    instead of the raw ones, which makes the map order-invariant.
    """
    X = as_matrix(X, name="X")
    ctx = _make_op_ctx(mlp_spec, X, sorted_input)
    out, _ = _op_forward(mlp_spec, params, ctx, cache=False)
    return out


def _check_op_spec(mlp_spec, n):
    if mlp_spec.n_inputs != n or mlp_spec.n_outputs != n:
        raise InvalidParameterError(
            f"increment net must map {n} -> {n}, got "
            f"{mlp_spec.n_inputs} -> {mlp_spec.n_outputs}"
        )
    expected = (True,) * (n - 1) + (False,)
    if tuple(mlp_spec.positive_outputs) != expected:
        raise InvalidParameterError(
            "increment net must softplus-mask exactly the first n - 1 outputs"
        )


def _make_op_ctx(mlp_spec, X, sorted_input):
    n = X.shape[1]
    if n < 2:
        raise InvalidInputError("intra order-preserving maps need n >= 2")
    _check_op_spec(mlp_spec, n)
    perm = argsort_descending(X)
    Y = np.take_along_axis(X, perm, axis=1)
    # Gaps of the sorted vector; exactly zero on ties, which is what makes
    # tied coordinates stay tied in the output.
    sigma = Y[:, :-1] - Y[:, 1:]
    net_in = Y if sorted_input else X
    return perm, Y, sigma, net_in


def _op_forward(mlp_spec, params, ctx, cache):
    perm, Y, sigma, net_in = ctx
    res = mlp_forward(mlp_spec, params, net_in, cache=cache)
    M, mcache = res if cache else (res, None)
    W = np.empty_like(Y)
    W[:, :-1] = sigma * M[:, :-1]
    W[:, -1] = M[:, -1] * Y[:, -1]
    V = reverse_cumsum(W, axis=1)
    out = np.empty_like(V)
    np.put_along_axis(out, perm, V, axis=1)
    return out, mcache


def _op_backward(mlp_spec, ctx, mcache, grad_out):
    perm, Y, sigma, _ = ctx
    # Output position perm[i, j] holds suffix sum j, so gather pulls the
    # upstream gradient into sorted coordinates ...
    dV = np.take_along_axis(grad_out, perm, axis=1)
    # ... and suffix sum j feeds every increment w_j with j >= its index,
    # which transposes to a running prefix sum.
    dW = np.cumsum(dV, axis=1)
    dM = np.empty_like(dW)
    dM[:, :-1] = dW[:, :-1] * sigma
    dM[:, -1] = dW[:, -1] * Y[:, -1]
    return mlp_backward(mlp_spec, mcache, dM)


# ---------------------------------------------------------------------------
# Estimators.


class _BaseLogitCalibrator(BaseEstimator, TransformerMixin):
    """Shared fit/transform plumbing for all calibrator families."""

    method = None  # tag used by the CLI and the model file format

    # -- subclass surface ---------------------------------------------------

    def _param_count(self, n_classes):
        raise NotImplementedError

    def _init_params(self, n_classes, rng):
        raise NotImplementedError

    def _make_ctx(self, X):
        """Precompute per-dataset structures reused across epochs."""
        return X

    def _forward_ctx(self, params, ctx, cache=False):
        """Return (calibrated logits, cache-for-backward-or-None)."""
        raise NotImplementedError

    def _backward_ctx(self, params, ctx, fwd_cache, grad_out):
        """Gradient of ``sum(grad_out * output)`` w.r.t. the flat params."""
        raise NotImplementedError

    def _regularizer(self, params):
        """Return (penalty value, penalty gradient)."""
        lam = float(self.lam)
        if lam < 0:
            raise InvalidParameterError("lam must be non-negative")
        if lam == 0.0:
            return 0.0, np.zeros_like(params)
        return 0.5 * lam * float(params @ params), lam * params

    # -- public API ---------------------------------------------------------

    def _forward(self, params, X):
        """Apply the map at explicit parameters; used by tests and training."""
        X = as_matrix(X, name="X")
        params = np.asarray(params, dtype=np.float64)
        expected = self._param_count(X.shape[1])
        if params.shape != (expected,):
            raise InvalidParameterError(
                f"expected {expected} parameters, got shape {params.shape}"
            )
        out, _ = self._forward_ctx(params, self._make_ctx(X), cache=False)
        return out

    def fit(self, X, y, X_val=None, y_val=None):
        """Fit on held-out logits ``X`` with integer labels ``y``.

        ``X_val``/``y_val`` only matter when ``early_stop_patience`` > 0;
        they decide when to stop, while the returned parameters are always
        the best training objective seen.
        """
        from .training import fit_params  # local import to avoid a cycle

        X, y = check_logits_labels(X, y)
        if X.shape[1] < 2:
            raise InvalidInputError("calibration needs at least 2 classes")
        result = fit_params(self, X, y, X_val=X_val, y_val=y_val)
        self.n_classes_ = X.shape[1]
        self.params_ = result.params
        self.n_iter_ = result.n_iter
        self.final_objective_ = result.final_objective
        self.objective_history_ = result.history
        return self

    def transform(self, X):
        """Calibrated logits for ``X``."""
        check_is_fitted(self, "params_")
        X = as_matrix(X, name="X")
        if X.shape[1] != self.n_classes_:
            raise InvalidInputError(
                f"X has {X.shape[1]} columns, model expects {self.n_classes_}"
            )
        out, _ = self._forward_ctx(self.params_, self._make_ctx(X), cache=False)
        return out

    def predict_proba(self, X):
        """Calibrated probabilities (softmax of the calibrated logits)."""
        return softmax(self.transform(X), axis=1)

    def predict(self, X):
        """Most probable class, lowest index on ties."""
        return np.argmax(self.predict_proba(X), axis=1)


class TemperatureScaling(_BaseLogitCalibrator):
    """One-parameter scaling ``f(x) = x / t``.

    The temperature is optimized through its logarithm so t stays positive
    without constraints; ``temperature_`` exposes the fitted value.
    """

    method = "ts"

    def __init__(
        self,
        lam=0.0,
        learning_rate=0.1,
        epochs=300,
        batch_size=None,
        seed=0,
        early_stop_patience=0,
    ):
        self.lam = lam
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed
        self.early_stop_patience = early_stop_patience

    def _param_count(self, n_classes):
        return 1

    def _init_params(self, n_classes, rng):
        return np.zeros(1)  # log t = 0, the identity map

    def _forward_ctx(self, params, ctx, cache=False):
        return ctx * np.exp(-params[0]), None

    def _backward_ctx(self, params, ctx, fwd_cache, grad_out):
        g = -np.exp(-params[0]) * float(np.sum(grad_out * ctx))
        return np.array([g])

    @property
    def temperature_(self):
        check_is_fitted(self, "params_")
        return float(np.exp(self.params_[0]))


class _AffineCalibrator(_BaseLogitCalibrator):
    """Shared machinery for matrix and Dirichlet scaling.

    Parameters are ``[W.ravel(), b]``; the input representation (raw logits
    or log-probabilities) is fixed by ``_make_ctx``. Instead of a plain L2
    term these families use :func:`off_diagonal_penalty`, with the bias
    weight defaulting to the off-diagonal weight.
    """

    def __init__(
        self,
        lam=0.0,
        lam_bias=None,
        learning_rate=0.05,
        epochs=500,
        batch_size=None,
        seed=0,
        early_stop_patience=0,
    ):
        self.lam = lam
        self.lam_bias = lam_bias
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed
        self.early_stop_patience = early_stop_patience

    def _param_count(self, n_classes):
        return n_classes * n_classes + n_classes

    def _init_params(self, n_classes, rng):
        return np.concatenate(
            [np.eye(n_classes).ravel(), np.zeros(n_classes)]
        )

    def _split(self, params):
        n2 = params.shape[0]
        n = int((np.sqrt(4 * n2 + 1) - 1) / 2)
        return params[: n * n].reshape(n, n), params[n * n :]

    def _forward_ctx(self, params, ctx, cache=False):
        W, b = self._split(params)
        return ctx @ W.T + b, None

    def _backward_ctx(self, params, ctx, fwd_cache, grad_out):
        dW = grad_out.T @ ctx
        db = grad_out.sum(axis=0)
        return np.concatenate([dW.ravel(), db])

    def _regularizer(self, params):
        lam_od = float(self.lam)
        lam_b = lam_od if self.lam_bias is None else float(self.lam_bias)
        W, b = self._split(params)
        value = off_diagonal_penalty(W, b, lam_od, lam_b)
        dW = 2.0 * lam_od * W
        np.fill_diagonal(dW, 0.0)
        db = 2.0 * lam_b * b
        return value, np.concatenate([dW.ravel(), db])

    @property
    def weights_(self):
        check_is_fitted(self, "params_")
        return self._split(self.params_)[0].copy()

    @property
    def bias_(self):
        check_is_fitted(self, "params_")
        return self._split(self.params_)[1].copy()


class MatrixScaling(_AffineCalibrator):
    """Affine calibration ``f(x) = W x + b``."""

    method = "ms"


class DirichletScaling(_AffineCalibrator):
    """Affine calibration on log-probabilities ``f(x) = W log_softmax(x) + b``.

    Subtracting the log-sum-exp first makes the map invariant to per-row
    logit shifts, which is the natural domain for probability vectors.
    """

    method = "dir"

    def _make_ctx(self, X):
        return log_softmax(X, axis=1)


class DiagonalCalibrator(_BaseLogitCalibrator):
    """One shared increasing scalar map applied to every coordinate.

    The map is the integral of a strictly positive derivative network plus a
    bias (see :class:`~iopcalib.network.MonotoneNetSpec`), so it is the same
    for all classes and strictly increasing; applied elementwise it keeps
    each row's ranking and also preserves coordinatewise dominance between
    rows. Parameter count does not grow with the number of classes.
    """

    method = "diag"

    def __init__(
        self,
        hidden=(8,),
        quadrature_points=50,
        lam=0.0,
        learning_rate=0.1,
        epochs=150,
        batch_size=None,
        seed=0,
        early_stop_patience=0,
    ):
        self.hidden = hidden
        self.quadrature_points = quadrature_points
        self.lam = lam
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed
        self.early_stop_patience = early_stop_patience

    def _net_spec(self, n_classes=None):
        return MonotoneNetSpec(
            derivative_net=MlpSpec(
                widths=(1, *map(int, self.hidden), 1),
                positive_outputs=(True,),
            ),
            quadrature_points=int(self.quadrature_points),
        )

    def _param_count(self, n_classes):
        return self._net_spec().param_count()

    def _init_params(self, n_classes, rng):
        spec = self._net_spec()
        params = np.concatenate([init_mlp_params(spec.derivative_net, rng), [0.0]])
        # Zero the last layer and pick its bias so the derivative is
        # exactly 1 everywhere: the initial map is the identity.
        h = spec.derivative_net.widths[-2]
        params[-2 - h : -2] = 0.0
        params[-2] = softplus_inverse(1.0)
        return params

    def _forward_ctx(self, params, ctx, cache=False):
        return monotone_eval_batch(self._net_spec(), params, ctx), None

    def _backward_ctx(self, params, ctx, fwd_cache, grad_out):
        return monotone_backward_batch(self._net_spec(), params, ctx, grad_out)

    def _nll_grad_fused(self, params, ctx, y):
        """Mean NLL plus its gradient in one chunked quadrature pass.

        The generic value-then-backward route would evaluate the derivative
        net three times per epoch over N * n_classes * quadrature_points
        rows. Rows are independent under the loss, so chunking over samples
        lets the backward pass reuse each chunk's forward activations.
        """
        spec = self._net_spec()
        net = spec.derivative_net
        net_params, bias = params[:-1], params[-1]
        nodes, weights = clenshaw_curtis(spec.quadrature_points)
        scaled = nodes + 1.0
        q = spec.quadrature_points
        n_rows, n_cols = ctx.shape
        step = max(1, _FUSED_CHUNK // (n_cols * q))
        nll_sum = 0.0
        net_grad = np.zeros(net.param_count())
        bias_grad = 0.0
        for lo in range(0, n_rows, step):
            hi = min(lo + step, n_rows)
            half = 0.5 * ctx[lo:hi].ravel()
            t = half[:, None] * scaled
            d, fwd = mlp_forward(net, net_params, t.reshape(-1, 1), cache=True)
            out = half * (d.reshape(-1, q) @ weights) + bias
            logp = log_softmax(out.reshape(hi - lo, n_cols), axis=1)
            rows = np.arange(hi - lo)
            nll_sum -= float(logp[rows, y[lo:hi]].sum())
            G = np.exp(logp)
            G[rows, y[lo:hi]] -= 1.0
            G /= n_rows
            g = G.ravel()
            coeff = (g * half)[:, None] * weights
            net_grad += mlp_backward(net, fwd, coeff.reshape(-1, 1))
            bias_grad += float(g.sum())
        grad = np.concatenate([net_grad, [bias_grad]])
        return nll_sum / n_rows, grad


class _IntraOrderPreservingBase(_BaseLogitCalibrator):
    """Common parts of the order-preserving and order-invariant families."""

    _sorted_input = False

    def __init__(
        self,
        hidden=(16, 16),
        lam=0.0,
        learning_rate=0.02,
        epochs=400,
        batch_size=None,
        seed=0,
        early_stop_patience=0,
    ):
        self.hidden = hidden
        self.lam = lam
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed
        self.early_stop_patience = early_stop_patience

    def _net_spec(self, n_classes):
        return MlpSpec(
            widths=(n_classes, *map(int, self.hidden), n_classes),
            positive_outputs=(True,) * (n_classes - 1) + (False,),
        )

    def _param_count(self, n_classes):
        return self._net_spec(n_classes).param_count()

    def _init_params(self, n_classes, rng):
        spec = self._net_spec(n_classes)
        params = init_mlp_params(spec, rng)
        # Zero the last layer; biases make every positive increment factor 1
        # and the tail factor 1, so the initial map is exactly the identity
        # (w_i = gap_i and w_n = y_n reassemble to x).
        n_out = spec.widths[-1]
        h = spec.widths[-2]
        params[-n_out - h * n_out : -n_out] = 0.0
        params[-n_out : -1] = softplus_inverse(1.0)
        params[-1] = 1.0
        return params

    def _make_ctx(self, X):
        return _make_op_ctx(self._net_spec(X.shape[1]), X, self._sorted_input)

    def _forward_ctx(self, params, ctx, cache=False):
        n = ctx[1].shape[1]
        return _op_forward(self._net_spec(n), params, ctx, cache)

    def _backward_ctx(self, params, ctx, fwd_cache, grad_out):
        n = ctx[1].shape[1]
        return _op_backward(self._net_spec(n), ctx, fwd_cache, grad_out)


class OrderPreservingCalibrator(_IntraOrderPreservingBase):
    """General intra order-preserving calibration.

    The increment network sees the raw logit vector, so increments can
    depend on which class holds which rank. Every output ranks exactly like
    its input: ties stay ties and strict orders stay strict.
    """

    method = "op"
    _sorted_input = False


class OrderInvariantCalibrator(_IntraOrderPreservingBase):
    """Order-invariant intra order-preserving calibration.

    The increment network sees only the sorted logits, so relabeling classes
    permutes the output the same way: f(Px) = P f(x) for any permutation P.
    """

    method = "oi"
    _sorted_input = True


class UnconstrainedCalibrator(_BaseLogitCalibrator):
    """Plain MLP on logits with no structural constraint (ablation).

    Nothing forces this map to keep the input's ranking, so accuracy can
    move after calibration; it exists to quantify what the order-preserving
    structure buys.
    """

    method = "unconstrained"

    def __init__(
        self,
        hidden=(16, 16),
        lam=0.0,
        learning_rate=0.02,
        epochs=400,
        batch_size=None,
        seed=0,
        early_stop_patience=0,
    ):
        self.hidden = hidden
        self.lam = lam
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed
        self.early_stop_patience = early_stop_patience

    def _net_spec(self, n_classes):
        return MlpSpec(
            widths=(n_classes, *map(int, self.hidden), n_classes),
            positive_outputs=(False,) * n_classes,
        )

    def _param_count(self, n_classes):
        return self._net_spec(n_classes).param_count()

    def _init_params(self, n_classes, rng):
        return init_mlp_params(self._net_spec(n_classes), rng)

    def _forward_ctx(self, params, ctx, cache=False):
        res = mlp_forward(self._net_spec(ctx.shape[1]), params, ctx, cache=cache)
        return res if cache else (res, None)

    def _backward_ctx(self, params, ctx, fwd_cache, grad_out):
        return mlp_backward(self._net_spec(ctx.shape[1]), fwd_cache, grad_out)


METHODS = {
    cls.method: cls
    for cls in (
        TemperatureScaling,
        MatrixScaling,
        DirichletScaling,
        DiagonalCalibrator,
        OrderInvariantCalibrator,
        OrderPreservingCalibrator,
        UnconstrainedCalibrator,
    )
}
