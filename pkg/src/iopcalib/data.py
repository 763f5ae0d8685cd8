"""Logit datasets: container, CSV and binary formats, synthesis, fold splits.

A dataset is an N x n float64 logit matrix with integer labels in [0, n).
Two on-disk formats are supported:

* CSV with header ``label,l0,...,l{n-1}`` and one sample per line. Floats
  are written with 17 significant digits, so values round-trip exactly.
* A little-endian binary format: magic ``IOPC``, u32 version (currently 1),
  u32 sample count, u32 class count, the logit matrix as row-major float64,
  then the labels as u32. Round-trips are bit-exact.

Synthetic datasets draw per-sample class distributions from a symmetric
Dirichlet, sample the label from that distribution, take log-probabilities
as the ideal (perfectly calibrated) logits, and then optionally distort them
with a temperature, shift, or affine map. The pre-distortion probabilities
are returned alongside so tests can compare against the generating truth.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

from .exceptions import DataFormatError, InvalidConfigError, InvalidInputError
from .validation import as_matrix, check_logits_labels

__all__ = [
    "LogitDataset",
    "SynthSpec",
    "FoldSplit",
    "load_csv",
    "save_csv",
    "load_binary",
    "save_binary",
    "synth_generate",
    "kfold_split",
    "atomic_write_text",
    "atomic_write_bytes",
]

MAGIC = b"IOPC"
BINARY_VERSION = 1

# Probabilities are floored here before taking logs so ideal logits stay
# finite even when the Dirichlet draw underflows to zero.
_PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class LogitDataset:
    """Validated logits and labels.

    Attributes
    ----------
    logits : ndarray of shape (n_samples, n_classes), float64
    labels : ndarray of shape (n_samples,), int64, in [0, n_classes)
    n_classes : int
    provenance : str
        Free-form note about where the data came from (file path or
        generator description).
    """

    logits: np.ndarray
    labels: np.ndarray
    n_classes: int
    provenance: str = ""

    def __post_init__(self):
        logits, labels = check_logits_labels(
            self.logits, self.labels, n_classes=self.n_classes
        )
        object.__setattr__(self, "logits", logits)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "n_classes", int(self.n_classes))

    @property
    def n_samples(self):
        return self.logits.shape[0]


def atomic_write_bytes(path, data):
    """Write bytes to ``path`` via a temp file and rename, never a torn file."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-iopcalib-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode("utf-8"))


def _csv_header(n_classes):
    return "label," + ",".join(f"l{j}" for j in range(n_classes))


def save_csv(dataset, path):
    """Write a dataset as CSV with exact float round-trip."""
    lines = [_csv_header(dataset.n_classes)]
    for label, row in zip(dataset.labels, dataset.logits):
        lines.append(
            str(int(label)) + "," + ",".join("%.17g" % v for v in row)
        )
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_csv(path):
    """Read a CSV dataset; malformed content raises DataFormatError."""
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        fields = header.split(",")
        if len(fields) < 2 or fields[0] != "label":
            raise DataFormatError(
                f"bad header {header!r}, expected 'label,l0,...'", line=1
            )
        n = len(fields) - 1
        if fields[1:] != [f"l{j}" for j in range(n)]:
            raise DataFormatError(
                f"bad header {header!r}, expected 'label,l0,...,l{n - 1}'",
                line=1,
            )
        labels = []
        rows = []
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != n + 1:
                raise DataFormatError(
                    f"expected {n + 1} fields, got {len(parts)}", line=lineno
                )
            try:
                labels.append(int(parts[0]))
            except ValueError:
                raise DataFormatError(
                    f"bad label {parts[0]!r}", line=lineno
                ) from None
            try:
                rows.append([float(v) for v in parts[1:]])
            except ValueError:
                raise DataFormatError(
                    f"bad logit value in {line!r}", line=lineno
                ) from None
    if not rows:
        raise DataFormatError("file holds no samples")
    try:
        return LogitDataset(
            logits=np.array(rows, dtype=np.float64),
            labels=np.array(labels, dtype=np.int64),
            n_classes=n,
            provenance=os.fspath(path),
        )
    except InvalidInputError as exc:
        raise DataFormatError(str(exc)) from exc


def save_binary(dataset, path):
    """Write a dataset in the IOPC binary format (bit-exact round-trip)."""
    header = MAGIC + struct.pack(
        "<III", BINARY_VERSION, dataset.n_samples, dataset.n_classes
    )
    body = dataset.logits.astype("<f8").tobytes(order="C")
    body += dataset.labels.astype("<u4").tobytes()
    atomic_write_bytes(path, header + body)


def load_binary(path):
    """Read an IOPC binary dataset; malformed content raises DataFormatError."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16:
        raise DataFormatError(f"file too short ({len(blob)} bytes)")
    if blob[:4] != MAGIC:
        raise DataFormatError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    version, n_samples, n_classes = struct.unpack("<III", blob[4:16])
    if version != BINARY_VERSION:
        raise DataFormatError(
            f"unsupported version {version}, expected {BINARY_VERSION}"
        )
    expected = 16 + n_samples * n_classes * 8 + n_samples * 4
    if len(blob) != expected:
        raise DataFormatError(
            f"file holds {len(blob)} bytes, expected {expected} for "
            f"{n_samples} samples x {n_classes} classes"
        )
    logits = np.frombuffer(
        blob, dtype="<f8", count=n_samples * n_classes, offset=16
    ).reshape(n_samples, n_classes)
    labels = np.frombuffer(
        blob, dtype="<u4", count=n_samples, offset=16 + logits.nbytes
    )
    try:
        return LogitDataset(
            logits=logits.astype(np.float64),
            labels=labels.astype(np.int64),
            n_classes=int(n_classes),
            provenance=os.fspath(path),
        )
    except InvalidInputError as exc:
        raise DataFormatError(str(exc)) from exc


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for a synthetic logit dataset.

    ``miscalibration`` is None for perfectly calibrated logits, or one of
    ``("temp", s)`` with s > 0 (multiplies logits by s, overconfident for
    s > 1), ``("shift", vector)``, or ``("affine", (W, b))``.
    """

    n_classes: int
    n_samples: int
    alpha: float = 1.0
    miscalibration: tuple | None = None
    seed: int = 0

    def validate(self):
        if self.n_classes < 2:
            raise InvalidConfigError(
                f"n_classes must be >= 2, got {self.n_classes}"
            )
        if self.n_samples < 1:
            raise InvalidConfigError(
                f"n_samples must be >= 1, got {self.n_samples}"
            )
        if not np.isfinite(self.alpha) or self.alpha <= 0:
            raise InvalidConfigError(f"alpha must be positive, got {self.alpha}")
        if self.seed < 0:
            raise InvalidConfigError(f"seed must be >= 0, got {self.seed}")
        if self.miscalibration is not None:
            _validate_miscalibration(self.miscalibration, self.n_classes)
        return self

    def describe(self):
        tag = "none"
        if self.miscalibration is not None:
            tag = self.miscalibration[0]
        return (
            f"synth(classes={self.n_classes},samples={self.n_samples},"
            f"alpha={self.alpha},miscal={tag},seed={self.seed})"
        )


def _validate_miscalibration(spec, n_classes):
    if not isinstance(spec, tuple) or len(spec) != 2:
        raise InvalidConfigError(
            "miscalibration must be ('temp', s), ('shift', v) or ('affine', (W, b))"
        )
    kind, arg = spec
    if kind == "temp":
        s = float(arg)
        if not np.isfinite(s) or s <= 0:
            raise InvalidConfigError(f"temp factor must be positive, got {arg!r}")
        return "temp", s
    if kind == "shift":
        v = np.asarray(arg, dtype=np.float64)
        if v.shape != (n_classes,) or not np.all(np.isfinite(v)):
            raise InvalidConfigError(
                f"shift must be a finite vector of length {n_classes}"
            )
        return "shift", v
    if kind == "affine":
        W = np.asarray(arg[0], dtype=np.float64)
        b = np.asarray(arg[1], dtype=np.float64)
        if W.shape != (n_classes, n_classes) or not np.all(np.isfinite(W)):
            raise InvalidConfigError(f"affine W must be finite {n_classes} square")
        if b.shape != (n_classes,) or not np.all(np.isfinite(b)):
            raise InvalidConfigError(
                f"affine b must be a finite vector of length {n_classes}"
            )
        return "affine", (W, b)
    raise InvalidConfigError(f"unknown miscalibration kind {kind!r}")


def synth_generate(spec):
    """Generate a synthetic dataset; returns (dataset, true_probs).

    ``true_probs`` are the per-sample class distributions the labels were
    drawn from; the undistorted logits are exactly their logs, so with no
    miscalibration the dataset is perfectly calibrated by construction.
    Deterministic in ``spec.seed``.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    probs = rng.dirichlet(
        np.full(spec.n_classes, float(spec.alpha)), size=spec.n_samples
    )
    probs = np.maximum(probs, _PROB_FLOOR)
    probs /= probs.sum(axis=1, keepdims=True)
    cum = np.cumsum(probs, axis=1)
    cum[:, -1] = 1.0
    u = rng.random(spec.n_samples)
    labels = np.argmax(cum >= u[:, None], axis=1)
    logits = np.log(probs)
    if spec.miscalibration is not None:
        kind, arg = _validate_miscalibration(spec.miscalibration, spec.n_classes)
        if kind == "temp":
            logits = logits * arg
        elif kind == "shift":
            logits = logits + arg
        else:
            W, b = arg
            logits = logits @ W.T + b
    dataset = LogitDataset(
        logits=logits,
        labels=labels,
        n_classes=spec.n_classes,
        provenance=spec.describe(),
    )
    return dataset, probs


@dataclass(frozen=True)
class FoldSplit:
    """Index split for one cross-validation fold."""

    train_idx: np.ndarray
    val_idx: np.ndarray


def kfold_split(n_samples, folds, seed):
    """Shuffled K-fold split; fold sizes differ by at most one.

    Deterministic in ``seed``; validation folds partition ``range(n_samples)``.
    """
    n_samples = int(n_samples)
    folds = int(folds)
    if n_samples < 1:
        raise InvalidInputError(f"n_samples must be >= 1, got {n_samples}")
    if folds < 2:
        raise InvalidConfigError(f"folds must be >= 2, got {folds}")
    if folds > n_samples:
        raise InvalidConfigError(
            f"cannot split {n_samples} samples into {folds} folds"
        )
    perm = np.random.default_rng(int(seed)).permutation(n_samples)
    parts = np.array_split(perm, folds)
    splits = []
    for i in range(folds):
        val = np.sort(parts[i])
        train = np.sort(np.concatenate([parts[j] for j in range(folds) if j != i]))
        splits.append(FoldSplit(train_idx=train, val_idx=val))
    return splits
