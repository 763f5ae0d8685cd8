"""Fitted-model persistence as a JSON document.

A model file carries the method tag, the class count, the architecture
needed to rebuild the map, a representative parameter vector, the full
ensemble of per-fold parameter vectors, and free-form training metadata:

.. code-block:: json

    {
      "format": "iopcalib-model",
      "version": 1,
      "method": "op",
      "n_classes": 10,
      "spec": {"hidden": [16, 16]},
      "params": [..],
      "ensemble": [[..], [..]],
      "train_meta": {"seed": 0, "lambda": 0.0, "folds": 5, "final_nll": 0.41}
    }

``params`` duplicates the ensemble member with the best validation score so
single-model consumers can ignore the ensemble.
"""

from __future__ import annotations

import json

import numpy as np

from .calibrators import METHODS
from .data import atomic_write_text
from .exceptions import DataFormatError
from .training import CalibrationEnsemble

__all__ = ["save_model", "load_model", "MODEL_FORMAT", "MODEL_VERSION"]

MODEL_FORMAT = "iopcalib-model"
MODEL_VERSION = 1

# Constructor arguments that define the map itself (not the optimizer) and
# therefore must be persisted to rebuild a fitted estimator.
_SPEC_KEYS = {
    "ts": (),
    "ms": (),
    "dir": (),
    "diag": ("hidden", "quadrature_points"),
    "oi": ("hidden",),
    "op": ("hidden",),
    "unconstrained": ("hidden",),
}


def save_model(path, models, train_meta, best_index=0):
    """Write fitted estimators (one per fold) as a model file.

    All models must be the same fitted estimator class; ``best_index`` picks
    the representative member for the ``params`` field.
    """
    if not models:
        raise ValueError("need at least one fitted model")
    first = models[0]
    method = first.method
    spec = {}
    for key in _SPEC_KEYS[method]:
        value = getattr(first, key)
        spec[key] = list(value) if key == "hidden" else value
    doc = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "method": method,
        "n_classes": int(first.n_classes_),
        "spec": spec,
        "params": [float(v) for v in models[best_index].params_],
        "ensemble": [[float(v) for v in m.params_] for m in models],
        "train_meta": train_meta,
    }
    atomic_write_text(path, json.dumps(doc, indent=2) + "\n")


def load_model(path):
    """Read a model file; returns (ensemble, document dict).

    The ensemble members are rebuilt estimators with their fitted parameter
    vectors restored. Malformed documents raise
    :class:`~iopcalib.exceptions.DataFormatError`.
    """
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != MODEL_FORMAT:
        raise DataFormatError(f"not a {MODEL_FORMAT} document")
    if doc.get("version") != MODEL_VERSION:
        raise DataFormatError(
            f"unsupported model version {doc.get('version')!r}"
        )
    method = doc.get("method")
    if method not in METHODS:
        raise DataFormatError(f"unknown method {method!r}")
    n_classes = doc.get("n_classes")
    if not isinstance(n_classes, int) or n_classes < 2:
        raise DataFormatError(f"bad n_classes {n_classes!r}")
    spec = doc.get("spec", {})
    kwargs = {}
    for key in _SPEC_KEYS[method]:
        if key in spec:
            kwargs[key] = (
                tuple(int(w) for w in spec[key]) if key == "hidden" else spec[key]
            )
    ensemble_params = doc.get("ensemble") or [doc.get("params")]
    models = []
    for member in ensemble_params:
        est = METHODS[method](**kwargs)
        params = np.asarray(member, dtype=np.float64)
        expected = est._param_count(n_classes)
        if params.shape != (expected,):
            raise DataFormatError(
                f"parameter vector has length {params.shape}, expected {expected}"
            )
        if not np.all(np.isfinite(params)):
            raise DataFormatError("parameter vector contains non-finite values")
        est.n_classes_ = int(n_classes)
        est.params_ = params
        models.append(est)
    return CalibrationEnsemble(models=models), doc
