"""Training loop, objective, cross-validation, and ensembling.

The objective is the mean negative log-likelihood of the calibrated softmax
plus the family's regularizer (an L2 term ``lam/2 * ||theta||^2`` for most
families; matrix and Dirichlet scaling use the off-diagonal penalty instead).
Gradients are exact: each calibrator implements its own reverse pass and the
softmax cross-entropy part contributes ``(softmax(f) - onehot) / N``.

Optimization is Adam with the usual constants (0.9, 0.999, 1e-8), full batch
unless a batch size is requested, fully deterministic given the seed. The
parameters returned are the best training objective evaluated during the
run, so fitting can never end above its starting objective; a non-finite
objective raises :class:`~iopcalib.exceptions.TrainingDivergedError` with the
iteration index.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_softmax
from sklearn.base import clone

from .data import kfold_split
from .exceptions import (
    InvalidConfigError,
    InvalidInputError,
    TrainingDivergedError,
)
from .validation import as_matrix, as_vector, check_logits_labels

__all__ = [
    "TrainConfig",
    "FitResult",
    "CVResult",
    "CalibrationEnsemble",
    "nll_loss",
    "mean_nll",
    "objective",
    "objective_grad",
    "fit_params",
    "cross_validate",
    "derive_seed",
    "max_workers_from_env",
]

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# Training objective may not end above its starting value by more than this.
IMPROVEMENT_SLACK = 1e-9

THREADS_ENV_VAR = "IOP_CALIB_THREADS"


@dataclass
class TrainConfig:
    """Bundle of optimizer and search settings used by the command line.

    The estimator classes carry the same knobs as flat constructor
    arguments; this object groups them for configuration files and the CLI.
    """

    learning_rate: float = 0.05
    epochs: int = 400
    batch_size: int | None = None
    lam: float = 0.0
    folds: int = 5
    seed: int = 0
    early_stop_patience: int = 0

    def validate(self):
        if not np.isfinite(self.learning_rate) or self.learning_rate <= 0:
            raise InvalidConfigError(
                f"learning_rate must be positive, got {self.learning_rate!r}"
            )
        if self.epochs < 0:
            raise InvalidConfigError(f"epochs must be >= 0, got {self.epochs!r}")
        if self.batch_size is not None and self.batch_size < 1:
            raise InvalidConfigError(
                f"batch_size must be >= 1 or None, got {self.batch_size!r}"
            )
        if not np.isfinite(self.lam) or self.lam < 0:
            raise InvalidConfigError(f"lam must be >= 0, got {self.lam!r}")
        if self.folds < 1:
            raise InvalidConfigError(f"folds must be >= 1, got {self.folds!r}")
        if self.seed < 0:
            raise InvalidConfigError(f"seed must be >= 0, got {self.seed!r}")
        if self.early_stop_patience < 0:
            raise InvalidConfigError(
                f"early_stop_patience must be >= 0, got {self.early_stop_patience!r}"
            )
        return self

    def estimator_kwargs(self):
        return {
            "learning_rate": self.learning_rate,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lam": self.lam,
            "seed": self.seed,
            "early_stop_patience": self.early_stop_patience,
        }


@dataclass
class FitResult:
    """Outcome of one optimization run."""

    params: np.ndarray
    n_iter: int
    final_objective: float
    history: list = field(default_factory=list)
    stopped_early: bool = False


def nll_loss(logits, label):
    """Negative log-likelihood of one logit vector under softmax."""
    logits = as_vector(logits, name="logits")
    label = int(label)
    if not 0 <= label < logits.shape[0]:
        raise InvalidInputError(
            f"label {label} out of range for {logits.shape[0]} classes"
        )
    return -float(log_softmax(logits)[label])


def mean_nll(logits, labels):
    """Mean negative log-likelihood over rows of a logit matrix."""
    logits, labels = check_logits_labels(logits, labels)
    logp = log_softmax(logits, axis=1)
    return -float(np.mean(logp[np.arange(labels.shape[0]), labels]))


def _objective_ctx(est, params, ctx, y):
    out, _ = est._forward_ctx(params, ctx, cache=False)
    logp = log_softmax(out, axis=1)
    nll = -float(np.mean(logp[np.arange(y.shape[0]), y]))
    reg, _ = est._regularizer(params)
    return nll + reg


def _objective_grad_ctx(est, params, ctx, y):
    fused = getattr(est, "_nll_grad_fused", None)
    if fused is not None:
        nll, data_grad = fused(params, ctx, y)
        reg, reg_grad = est._regularizer(params)
        return nll + reg, data_grad + reg_grad
    out, fwd_cache = est._forward_ctx(params, ctx, cache=True)
    logp = log_softmax(out, axis=1)
    n = y.shape[0]
    rows = np.arange(n)
    nll = -float(np.mean(logp[rows, y]))
    G = np.exp(logp)
    G[rows, y] -= 1.0
    G /= n
    reg, reg_grad = est._regularizer(params)
    grad = est._backward_ctx(params, ctx, fwd_cache, G) + reg_grad
    return nll + reg, grad


def objective(est, params, X, y):
    """Training objective of ``est`` at explicit parameters on (X, y)."""
    X, y = check_logits_labels(X, y)
    params = np.asarray(params, dtype=np.float64)
    return _objective_ctx(est, params, est._make_ctx(X), y)


def objective_grad(est, params, X, y):
    """Objective value and its exact gradient at explicit parameters."""
    X, y = check_logits_labels(X, y)
    params = np.asarray(params, dtype=np.float64)
    return _objective_grad_ctx(est, params, est._make_ctx(X), y)


class _AdamState:
    def __init__(self, size):
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def update(self, params, grad, lr):
        self.t += 1
        self.m = ADAM_BETA1 * self.m + (1.0 - ADAM_BETA1) * grad
        self.v = ADAM_BETA2 * self.v + (1.0 - ADAM_BETA2) * grad**2
        m_hat = self.m / (1.0 - ADAM_BETA1**self.t)
        v_hat = self.v / (1.0 - ADAM_BETA2**self.t)
        return params - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


def _check_finite(value, grad, iteration):
    if not np.isfinite(value) or (grad is not None and not np.all(np.isfinite(grad))):
        raise TrainingDivergedError(
            f"objective became non-finite at iteration {iteration}", iteration
        )


def fit_params(est, X, y, X_val=None, y_val=None):
    """Run Adam on the estimator's objective; called by ``fit``.

    Returns a :class:`FitResult` whose parameters achieve the best training
    objective evaluated during the run (initial parameters included, so zero
    epochs returns them unchanged). When ``early_stop_patience`` > 0 and
    validation data is supplied, the epoch loop stops once the validation
    NLL has not improved for that many epochs.
    """
    lr = float(est.learning_rate)
    epochs = int(est.epochs)
    batch_size = est.batch_size
    patience = int(est.early_stop_patience)
    TrainConfig(
        learning_rate=lr,
        epochs=epochs,
        batch_size=None if batch_size is None else int(batch_size),
        lam=float(est.lam),
        seed=int(est.seed),
        early_stop_patience=patience,
    ).validate()

    n = X.shape[1]
    rng = np.random.default_rng(int(est.seed))
    params = np.asarray(est._init_params(n, rng), dtype=np.float64)
    ctx = est._make_ctx(X)

    use_val = patience > 0 and X_val is not None and y_val is not None
    if use_val:
        X_val, y_val = check_logits_labels(X_val, y_val, n_classes=n)
        val_ctx = est._make_ctx(X_val)

    history = []
    best_value, best_params = np.inf, params.copy()
    state = _AdamState(params.shape[0])
    best_val_nll = np.inf
    stale = 0
    stopped_early = False
    n_iter = 0

    def track(value, params):
        nonlocal best_value, best_params
        history.append(value)
        if value < best_value:
            best_value, best_params = value, params.copy()

    for epoch in range(epochs):
        if batch_size is None:
            # The value here is the objective at the pre-update parameters,
            # so each epoch needs just one combined value-and-gradient pass.
            value, grad = _objective_grad_ctx(est, params, ctx, y)
            _check_finite(value, grad, epoch)
            track(value, params)
            params = state.update(params, grad, lr)
        else:
            if epoch == 0:
                track(_objective_ctx(est, params, ctx, y), params)
            order = rng.permutation(y.shape[0])
            for lo in range(0, order.shape[0], int(batch_size)):
                idx = order[lo : lo + int(batch_size)]
                bctx = est._make_ctx(X[idx])
                bval, grad = _objective_grad_ctx(est, params, bctx, y[idx])
                _check_finite(bval, grad, epoch)
                params = state.update(params, grad, lr)
            value = _objective_ctx(est, params, ctx, y)
            _check_finite(value, None, epoch)
            track(value, params)
        n_iter = epoch + 1
        if use_val:
            val_out, _ = est._forward_ctx(params, val_ctx, cache=False)
            logp = log_softmax(val_out, axis=1)
            val_nll = -float(np.mean(logp[np.arange(y_val.shape[0]), y_val]))
            if val_nll < best_val_nll - 1e-12:
                best_val_nll = val_nll
                stale = 0
            else:
                stale += 1
                if stale >= patience:
                    stopped_early = True
                    break

    if batch_size is None:
        # Objective at the final parameters (epochs = 0 lands here too, so
        # the initial parameters always get evaluated at least once).
        value = _objective_ctx(est, params, ctx, y)
        _check_finite(value, None, max(n_iter - 1, 0))
        track(value, params)
    elif epochs == 0:
        track(_objective_ctx(est, params, ctx, y), params)

    return FitResult(
        params=best_params,
        n_iter=n_iter,
        final_objective=best_value,
        history=history,
        stopped_early=stopped_early,
    )


def derive_seed(seed, grid_index, fold_index):
    """Deterministic child seed for one (grid point, fold) fit.

    Independent of execution order, so threaded and serial cross-validation
    produce identical models.
    """
    seq = np.random.SeedSequence([int(seed), int(grid_index), int(fold_index)])
    return int(seq.generate_state(1, np.uint64)[0])


def max_workers_from_env():
    """Worker cap from the IOP_CALIB_THREADS environment variable (default 1)."""
    raw = os.environ.get(THREADS_ENV_VAR, "").strip()
    if not raw:
        return 1
    try:
        workers = int(raw)
    except ValueError as exc:
        raise InvalidConfigError(
            f"{THREADS_ENV_VAR} must be an integer, got {raw!r}"
        ) from exc
    return max(1, workers)


@dataclass
class CalibrationEnsemble:
    """Average of per-fold calibrators in probability space.

    Each member maps logits to probabilities; the ensemble prediction is the
    plain mean. When every member preserves the input's ranking the mean
    does too, so ensembling keeps accuracy intact for the order-preserving
    families.
    """

    models: list

    def __post_init__(self):
        if not self.models:
            raise InvalidConfigError("ensemble needs at least one model")

    @property
    def n_classes_(self):
        return self.models[0].n_classes_

    def predict_proba(self, X):
        acc = self.models[0].predict_proba(X)
        for model in self.models[1:]:
            acc = acc + model.predict_proba(X)
        return acc / len(self.models)

    def predict(self, X):
        return np.argmax(self.predict_proba(X), axis=1)


@dataclass
class CVResult:
    """Outcome of a cross-validated hyperparameter search."""

    grid: list
    fold_val_nll: np.ndarray  # shape (len(grid), folds)
    mean_val_nll: np.ndarray  # shape (len(grid),)
    best_index: int
    models: list  # fitted fold models of the winning grid point
    ensemble: CalibrationEnsemble

    @property
    def best_point(self):
        return self.grid[self.best_index]


def cross_validate(est, grid, X, y, folds=5, seed=0):
    """K-fold search over a hyperparameter grid with per-fold ensembling.

    ``grid`` is a sequence of dicts of estimator parameters (for example
    ``{"hidden": (16, 16), "lam": 1e-3}``). Every (grid point, fold) pair is
    fit on the fold's training part with a deterministic child seed and
    scored by validation NLL; the grid point with the lowest mean wins, ties
    going to the earlier entry. The winner's fold models form the ensemble.

    Worker threads are capped by the IOP_CALIB_THREADS environment variable;
    results do not depend on the cap.
    """
    X, y = check_logits_labels(X, y)
    grid = [dict(point) for point in grid]
    if not grid:
        raise InvalidConfigError("grid must contain at least one point")
    splits = kfold_split(X.shape[0], folds, seed)

    def run(job):
        gi, fi = job
        split = splits[fi]
        model = clone(est)
        model.set_params(**grid[gi])
        model.set_params(seed=derive_seed(seed, gi, fi))
        X_tr, y_tr = X[split.train_idx], y[split.train_idx]
        X_va, y_va = X[split.val_idx], y[split.val_idx]
        model.fit(X_tr, y_tr, X_val=X_va, y_val=y_va)
        return gi, fi, model, mean_nll(model.transform(X_va), y_va)

    jobs = [(gi, fi) for gi in range(len(grid)) for fi in range(folds)]
    workers = max_workers_from_env()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(run, jobs))
    else:
        outcomes = [run(job) for job in jobs]

    fold_val_nll = np.full((len(grid), folds), np.nan)
    models = {}
    for gi, fi, model, val in outcomes:
        fold_val_nll[gi, fi] = val
        models[gi, fi] = model
    mean_val_nll = fold_val_nll.mean(axis=1)
    best_index = int(np.argmin(mean_val_nll))
    best_models = [models[best_index, fi] for fi in range(folds)]
    return CVResult(
        grid=grid,
        fold_val_nll=fold_val_nll,
        mean_val_nll=mean_val_nll,
        best_index=best_index,
        models=best_models,
        ensemble=CalibrationEnsemble(models=best_models),
    )
