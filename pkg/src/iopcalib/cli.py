"""Command-line interface.

Subcommands::

    iopcalib synth    generate a synthetic logit dataset
    iopcalib fit      fit a calibrator on a training dataset
    iopcalib eval     evaluate a fitted model on a test dataset
    iopcalib compare  fit several methods and tabulate their metrics
    iopcalib diagram  dump reliability-diagram bins as CSV

Datasets are CSV (``label,l0,...``) or the IOPC binary format, detected by
content. All outputs are written atomically (temp file + rename). Exit codes:
0 on success, 2 on usage or validation errors, 3 on numerical failure during
training. Worker threads for cross-validation are capped by the
IOP_CALIB_THREADS environment variable.
"""

from __future__ import annotations

import functools
import json
import os

import click
import numpy as np
from scipy.special import softmax
from scipy.stats import rankdata

from .calibrators import METHODS
from .data import (
    MAGIC,
    SynthSpec,
    atomic_write_text,
    load_binary,
    load_csv,
    save_binary,
    save_csv,
    synth_generate,
)
from .exceptions import (
    CalibrationError,
    DataFormatError,
    InvalidConfigError,
    InvalidInputError,
    InvalidParameterError,
    TrainingDivergedError,
)
from .metrics import (
    METRIC_NAMES,
    MetricReport,
    accuracy_topk,
    bins_to_csv,
    compute_report,
    reliability_diagram,
)
from .modelfile import load_model, save_model
from .training import cross_validate, mean_nll
from . import __version__

DEFAULT_METRICS = "ece,classwise_ece,nll,brier,accuracy,topk_accuracy"
COMPARE_METRICS = (
    "ece",
    "classwise_ece",
    "nll",
    "brier",
    "debiased_ece",
    "marginal_ce",
)


class _NumericalFailure(click.ClickException):
    exit_code = 3


def _friendly_errors(fn):
    """Map package exceptions onto the documented exit codes."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except TrainingDivergedError as exc:
            raise _NumericalFailure(f"training diverged: {exc}") from exc
        except (
            DataFormatError,
            InvalidInputError,
            InvalidConfigError,
            InvalidParameterError,
        ) as exc:
            raise click.UsageError(str(exc)) from exc
        except CalibrationError as exc:
            raise click.UsageError(str(exc)) from exc

    return wrapper


def _load_dataset(path):
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == MAGIC:
        return load_binary(path)
    return load_csv(path)


def _parse_hidden(text):
    try:
        widths = tuple(int(tok) for tok in text.split(",") if tok.strip())
    except ValueError:
        raise click.UsageError(f"--hidden must be comma-separated ints, got {text!r}")
    if not widths or any(w <= 0 for w in widths):
        raise click.UsageError(f"--hidden widths must be positive, got {text!r}")
    return widths


_GRID_KEYS = {
    "lambda": "lam",
    "lam": "lam",
    "lam_bias": "lam_bias",
    "hidden": "hidden",
    "quadrature_points": "quadrature_points",
    "learning_rate": "learning_rate",
    "epochs": "epochs",
    "batch_size": "batch_size",
}


def _parse_grid(path):
    with open(path, "r", encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise click.UsageError(f"grid file is not valid JSON: {exc}")
    if not isinstance(raw, list) or not raw:
        raise click.UsageError("grid file must hold a non-empty JSON list")
    grid = []
    for i, entry in enumerate(raw):
        if not isinstance(entry, dict):
            raise click.UsageError(f"grid entry {i} must be an object")
        point = {}
        for key, value in entry.items():
            if key not in _GRID_KEYS:
                raise click.UsageError(
                    f"grid entry {i}: unknown key {key!r} "
                    f"(choose from {sorted(set(_GRID_KEYS))})"
                )
            name = _GRID_KEYS[key]
            point[name] = tuple(int(w) for w in value) if name == "hidden" else value
        grid.append(point)
    return grid


def _build_estimator(method, **overrides):
    cls = METHODS[method]
    kwargs = {k: v for k, v in overrides.items() if v is not None}
    try:
        return cls(**kwargs)
    except TypeError:
        bad = sorted(set(kwargs) - set(cls().get_params()))
        raise click.UsageError(
            f"method {method!r} does not accept option(s): {', '.join(bad)}"
        )


def _parse_miscal(text, n_classes):
    text = text.strip()
    if text in ("", "none"):
        return None
    kind, sep, arg = text.partition(":")
    if not sep:
        raise click.UsageError(
            "--miscal must be 'none', 'temp:S', 'shift:v0,v1,...' or 'affine:FILE'"
        )
    if kind == "temp":
        try:
            return ("temp", float(arg))
        except ValueError:
            raise click.UsageError(f"bad temp factor {arg!r}")
    if kind == "shift":
        try:
            vec = [float(tok) for tok in arg.split(",")]
        except ValueError:
            raise click.UsageError(f"bad shift vector {arg!r}")
        return ("shift", np.asarray(vec))
    if kind == "affine":
        try:
            with open(arg, "r", encoding="utf-8") as fh:
                doc = json.load(fh)
            return ("affine", (np.asarray(doc["W"]), np.asarray(doc["b"])))
        except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
            raise click.UsageError(f"cannot read affine file {arg!r}: {exc}")
    raise click.UsageError(f"unknown miscalibration kind {kind!r}")


@click.group()
@click.version_option(__version__)
def main():
    """Post-hoc calibration of classifier logits."""


@main.command()
@click.option("--classes", type=int, required=True, help="Number of classes.")
@click.option("--samples", type=int, required=True, help="Number of samples.")
@click.option("--alpha", type=float, default=1.0, show_default=True,
              help="Symmetric Dirichlet concentration.")
@click.option("--miscal", default="none", show_default=True,
              help="none | temp:S | shift:v0,v1,... | affine:FILE")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--format", "fmt", type=click.Choice(["csv", "binary"]),
              default="csv", show_default=True)
@click.option("--out", "out_path", required=True,
              type=click.Path(dir_okay=False, writable=True))
@_friendly_errors
def synth(classes, samples, alpha, miscal, seed, fmt, out_path):
    """Generate a synthetic logit dataset."""
    spec = SynthSpec(
        n_classes=classes,
        n_samples=samples,
        alpha=alpha,
        miscalibration=_parse_miscal(miscal, classes),
        seed=seed,
    )
    dataset, _ = synth_generate(spec)
    if fmt == "binary":
        save_binary(dataset, out_path)
    else:
        save_csv(dataset, out_path)
    click.echo(f"wrote {dataset.n_samples} samples to {out_path} [{dataset.provenance}]")


@main.command()
@click.option("--method", type=click.Choice(sorted(METHODS)), required=True)
@click.option("--train", "train_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--grid", "grid_path", type=click.Path(exists=True, dir_okay=False),
              help="JSON list of hyperparameter points for cross-validation.")
@click.option("--folds", type=int, default=5, show_default=True,
              help="Cross-validation folds; 1 fits once on all data.")
@click.option("--lambda", "lam", type=float, default=0.0, show_default=True,
              help="Regularization weight.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--epochs", type=int, default=None)
@click.option("--lr", "learning_rate", type=float, default=None)
@click.option("--hidden", default=None, help="Comma-separated hidden widths.")
@click.option("--quadrature-points", type=int, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--early-stop", "early_stop_patience", type=int, default=None,
              help="Stop after this many epochs without validation improvement.")
@click.option("--out", "out_path", required=True,
              type=click.Path(dir_okay=False, writable=True))
@_friendly_errors
def fit(method, train_path, grid_path, folds, lam, seed, epochs, learning_rate,
        hidden, quadrature_points, batch_size, early_stop_patience, out_path):
    """Fit a calibrator and write a model file."""
    if folds < 1:
        raise click.UsageError("--folds must be >= 1")
    dataset = _load_dataset(train_path)
    est = _build_estimator(
        method,
        lam=lam,
        seed=seed,
        epochs=epochs,
        learning_rate=learning_rate,
        hidden=None if hidden is None else _parse_hidden(hidden),
        quadrature_points=quadrature_points,
        batch_size=batch_size,
        early_stop_patience=early_stop_patience,
    )
    X, y = dataset.logits, dataset.labels
    train_meta = {
        "seed": seed,
        "lambda": lam,
        "folds": folds,
        "train_samples": int(dataset.n_samples),
        "provenance": dataset.provenance,
    }
    if folds == 1:
        if grid_path is not None:
            raise click.UsageError("--grid requires --folds >= 2")
        est.fit(X, y)
        models = [est]
        best_index = 0
        train_meta["final_nll"] = mean_nll(est.transform(X), y)
    else:
        grid = _parse_grid(grid_path) if grid_path else [{}]
        cv = cross_validate(est, grid, X, y, folds=folds, seed=seed)
        models = cv.models
        best_index = int(np.argmin(cv.fold_val_nll[cv.best_index]))
        train_meta["final_nll"] = float(cv.mean_val_nll[cv.best_index])
        train_meta["fold_val_nll"] = [
            float(v) for v in cv.fold_val_nll[cv.best_index]
        ]
        train_meta["selected"] = {
            k: (list(v) if isinstance(v, tuple) else v)
            for k, v in cv.best_point.items()
        }
        train_meta["grid_mean_val_nll"] = [float(v) for v in cv.mean_val_nll]
    if method == "ts":
        train_meta["temperature"] = models[best_index].temperature_
    save_model(out_path, models, train_meta, best_index=best_index)
    click.echo(
        f"fit {method} on {dataset.n_samples} samples "
        f"(folds={folds}, nll={train_meta['final_nll']:.6f}) -> {out_path}"
    )
    if "selected" in train_meta:
        click.echo(f"selected grid point: {train_meta['selected']}")
    if "temperature" in train_meta:
        click.echo(f"temperature: {train_meta['temperature']:.6f}")


@main.command("eval")
@click.option("--model", "model_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--test", "test_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--metrics", default=DEFAULT_METRICS, show_default=True,
              help="Comma-separated metric names.")
@click.option("--bins", type=int, default=15, show_default=True)
@click.option("--topk", type=int, default=5, show_default=True)
@click.option("--out", "out_path", default=None,
              type=click.Path(dir_okay=False, writable=True))
@_friendly_errors
def eval_cmd(model_path, test_path, metrics, bins, topk, out_path):
    """Evaluate a fitted model; reports calibrated vs uncalibrated metrics."""
    ensemble, _ = load_model(model_path)
    dataset = _load_dataset(test_path)
    if dataset.n_classes != ensemble.n_classes_:
        raise click.UsageError(
            f"model expects {ensemble.n_classes_} classes, dataset has "
            f"{dataset.n_classes}"
        )
    names = tuple(tok.strip() for tok in metrics.split(",") if tok.strip())
    for name in names:
        if name not in METRIC_NAMES:
            raise click.UsageError(
                f"unknown metric {name!r}; choose from {', '.join(METRIC_NAMES)}"
            )
    y = dataset.labels
    probs_cal = ensemble.predict_proba(dataset.logits)
    probs_uncal = softmax(dataset.logits, axis=1)
    cal = compute_report(probs_cal, y, metrics=names, n_bins=bins, topk=topk)
    uncal = compute_report(probs_uncal, y, metrics=names, n_bins=bins, topk=topk)
    values = dict(cal.values)
    values.update({f"uncal_{k}": v for k, v in uncal.values.items()})
    k_eff = min(topk, dataset.n_classes)
    values["accuracy_delta"] = accuracy_topk(probs_cal, y, 1) - accuracy_topk(
        probs_uncal, y, 1
    )
    values["topk_accuracy_delta"] = accuracy_topk(
        probs_cal, y, k_eff
    ) - accuracy_topk(probs_uncal, y, k_eff)
    report = MetricReport(values=values, bins=cal.bins)
    text = report.to_json()
    if out_path:
        atomic_write_text(out_path, text + "\n")
        click.echo(f"wrote report to {out_path}")
    for name in names:
        click.echo(
            f"{name:>16}: {values[name]: .6f}  (uncalibrated {values['uncal_' + name]: .6f})"
        )
    click.echo(f"{'accuracy_delta':>16}: {values['accuracy_delta']: .6f}")


@main.command()
@click.option("--train", "train_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--test", "test_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--methods", default="ts,diag,oi,op", show_default=True)
@click.option("--folds", type=int, default=5, show_default=True)
@click.option("--bins", type=int, default=15, show_default=True)
@click.option("--lambda", "lam", type=float, default=0.0, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--epochs", type=int, default=None)
@click.option("--lr", "learning_rate", type=float, default=None)
@click.option("--hidden", default=None)
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@_friendly_errors
def compare(train_path, test_path, methods, folds, bins, lam, seed, epochs,
            learning_rate, hidden, out_dir):
    """Fit several methods and tabulate test metrics against uncalibrated."""
    names = [tok.strip() for tok in methods.split(",") if tok.strip()]
    for name in names:
        if name not in METHODS:
            raise click.UsageError(
                f"unknown method {name!r}; choose from {', '.join(sorted(METHODS))}"
            )
    train = _load_dataset(train_path)
    test = _load_dataset(test_path)
    if train.n_classes != test.n_classes:
        raise click.UsageError("train and test class counts differ")
    os.makedirs(out_dir, exist_ok=True)
    y = test.labels
    columns = {}
    probs_uncal = softmax(test.logits, axis=1)
    columns["uncal"] = _compare_column(probs_uncal, probs_uncal, y, bins, test.n_classes)
    for method in names:
        est = _build_estimator(
            method,
            lam=lam,
            seed=seed,
            epochs=epochs,
            learning_rate=learning_rate,
            hidden=None if hidden is None else _parse_hidden(hidden),
        )
        if folds == 1:
            est.fit(train.logits, train.labels)
            models = [est]
            meta = {"seed": seed, "lambda": lam, "folds": 1,
                    "final_nll": mean_nll(est.transform(train.logits), train.labels)}
        else:
            cv = cross_validate(est, [{}], train.logits, train.labels,
                                folds=folds, seed=seed)
            models = cv.models
            meta = {"seed": seed, "lambda": lam, "folds": folds,
                    "final_nll": float(cv.mean_val_nll[cv.best_index])}
        save_model(os.path.join(out_dir, f"{method}.model.json"), models, meta)
        probs = _ensemble_probs(models, test.logits)
        columns[method] = _compare_column(probs, probs_uncal, y, bins, test.n_classes)
    table_txt = _format_compare_table(columns)
    table_csv = _format_compare_csv(columns)
    atomic_write_text(os.path.join(out_dir, "table.txt"), table_txt)
    atomic_write_text(os.path.join(out_dir, "table.csv"), table_csv)
    click.echo(table_txt, nl=False)
    click.echo(f"wrote {out_dir}/table.txt and {out_dir}/table.csv")


def _ensemble_probs(models, logits):
    acc = models[0].predict_proba(logits)
    for m in models[1:]:
        acc = acc + m.predict_proba(logits)
    return acc / len(models)


def _compare_column(probs, probs_uncal, y, bins, n_classes):
    values = {}
    for name in COMPARE_METRICS:
        report = compute_report(probs, y, metrics=(name,), n_bins=bins)
        values[name] = report.values[name]
    k_eff = min(5, n_classes)
    values["accuracy_delta"] = accuracy_topk(probs, y, 1) - accuracy_topk(
        probs_uncal, y, 1
    )
    values["topk_accuracy_delta"] = accuracy_topk(probs, y, k_eff) - accuracy_topk(
        probs_uncal, y, k_eff
    )
    return values


def _avg_rel_error(columns):
    """Mean over metrics of each method's value relative to uncalibrated."""
    out = {}
    for method in columns:
        ratios = []
        for name in COMPARE_METRICS:
            base = columns["uncal"][name]
            if base > 0:
                ratios.append(columns[method][name] / base)
        out[method] = sum(ratios) / len(ratios) if ratios else float("nan")
    return out


def _format_compare_table(columns):
    methods = list(columns)
    lines = []
    header = f"{'metric':<20}" + "".join(f"{m:>16}" for m in methods)
    lines.append(header)
    for name in COMPARE_METRICS:
        row = [columns[m][name] for m in methods]
        ranks = rankdata(row, method="min").astype(int)
        cells = [f"{v:.4f} ({r})" for v, r in zip(row, ranks)]
        lines.append(f"{name:<20}" + "".join(f"{c:>16}" for c in cells))
    for name in ("accuracy_delta", "topk_accuracy_delta"):
        cells = [f"{columns[m][name]:+.4f}" for m in methods]
        lines.append(f"{name:<20}" + "".join(f"{c:>16}" for c in cells))
    are = _avg_rel_error(columns)
    cells = [f"{are[m]:.4f}" for m in methods]
    lines.append(f"{'avg_rel_error':<20}" + "".join(f"{c:>16}" for c in cells))
    return "\n".join(lines) + "\n"


def _format_compare_csv(columns):
    fields = list(COMPARE_METRICS) + [
        "accuracy_delta",
        "topk_accuracy_delta",
        "avg_rel_error",
    ]
    are = _avg_rel_error(columns)
    lines = ["method," + ",".join(fields)]
    for method, values in columns.items():
        row = [values[name] for name in COMPARE_METRICS]
        row += [values["accuracy_delta"], values["topk_accuracy_delta"], are[method]]
        lines.append(method + "," + ",".join("%.17g" % v for v in row))
    return "\n".join(lines) + "\n"


@main.command()
@click.option("--model", "model_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--test", "test_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--bins", type=int, default=15, show_default=True)
@click.option("--weighted", is_flag=True, default=False,
              help="Scale gaps by each bin's sample share.")
@click.option("--out", "out_path", required=True,
              type=click.Path(dir_okay=False, writable=True))
@_friendly_errors
def diagram(model_path, test_path, bins, weighted, out_path):
    """Write reliability-diagram bins (calibrated and uncalibrated) as CSV."""
    ensemble, _ = load_model(model_path)
    dataset = _load_dataset(test_path)
    if dataset.n_classes != ensemble.n_classes_:
        raise click.UsageError(
            f"model expects {ensemble.n_classes_} classes, dataset has "
            f"{dataset.n_classes}"
        )
    y = dataset.labels
    probs_cal = ensemble.predict_proba(dataset.logits)
    probs_uncal = softmax(dataset.logits, axis=1)
    records_cal = reliability_diagram(probs_cal, y, n_bins=bins, weighted=weighted)
    records_uncal = reliability_diagram(probs_uncal, y, n_bins=bins, weighted=weighted)
    root, ext = os.path.splitext(out_path)
    uncal_path = f"{root}.uncal{ext or '.csv'}"
    atomic_write_text(out_path, bins_to_csv(records_cal))
    atomic_write_text(uncal_path, bins_to_csv(records_uncal))
    click.echo(f"wrote {out_path} (calibrated) and {uncal_path} (uncalibrated)")


if __name__ == "__main__":
    main()
