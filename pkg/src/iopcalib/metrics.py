"""Calibration and accuracy metrics over probability matrices.

All metrics take an N x k probability matrix (rows must sum to 1 within
1e-6) and integer labels. Binned metrics use M equal-width bins on (0, 1]:
a probability p falls in bin ``ceil(p * M) - 1``, so the right edge belongs
to the bin and exactly 1.0 lands in the top bin. Empty bins contribute
nothing.

Reductions use ``math.fsum``, which returns the correctly rounded sum
independent of accumulation order; per-bin accumulations use ``np.bincount``,
which adds in sample order. Together these make every metric reproducible
bit-for-bit against a straightforward loop-based reimplementation.

The headline metric is the expected calibration error (ece): the count-
weighted mean absolute gap between each bin's accuracy and its mean top
confidence. classwise_ece averages the same construction over every class's
probability column, which also makes its blind spot testable: a predictor
collapsed to uniform confidences lands all mass in one bin per class where
predicted and empirical frequencies agree, scoring near zero while being
useless. debiased_ece and marginal_ce subtract each bin's sampling variance
from the squared gap before aggregating, removing the upward bias the plugin
estimators have at small counts.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import DataFormatError, InvalidInputError
from .validation import as_labels, check_prob_matrix

__all__ = [
    "BinRecord",
    "MetricReport",
    "METRIC_NAMES",
    "ece",
    "classwise_ece",
    "brier",
    "nll_metric",
    "accuracy_topk",
    "reliability_diagram",
    "debiased_ece",
    "marginal_ce",
    "compute_report",
    "bins_to_csv",
    "bins_from_csv",
]

NLL_PROB_FLOOR = 1e-12

BIN_CSV_HEADER = "bin_lo,bin_hi,count,conf,acc,gap"

METRIC_NAMES = (
    "ece",
    "classwise_ece",
    "nll",
    "brier",
    "accuracy",
    "topk_accuracy",
    "debiased_ece",
    "marginal_ce",
)


def _check_bins(n_bins):
    n_bins = int(n_bins)
    if n_bins < 1:
        raise InvalidInputError(f"n_bins must be >= 1, got {n_bins}")
    return n_bins


def _bin_index(p, n_bins):
    """Bin of each probability under the (lo, hi] convention."""
    idx = np.ceil(np.asarray(p, dtype=np.float64) * n_bins).astype(np.int64) - 1
    return np.clip(idx, 0, n_bins - 1)


def _top_stats(probs, labels, n_bins):
    """Per-bin (count, sum of confidences, sum of corrects) for top-1."""
    conf = probs.max(axis=1)
    pred = np.argmax(probs, axis=1)
    correct = (pred == labels).astype(np.float64)
    idx = _bin_index(conf, n_bins)
    counts = np.bincount(idx, minlength=n_bins)
    conf_sum = np.bincount(idx, weights=conf, minlength=n_bins)
    acc_sum = np.bincount(idx, weights=correct, minlength=n_bins)
    return counts, conf_sum, acc_sum


def _classwise_stats(probs, labels, n_bins):
    """Per-(class, bin) counts and sums, accumulated in sample order."""
    n, k = probs.shape
    idx = _bin_index(probs, n_bins)
    flat = (np.arange(k)[:, None] * n_bins + idx.T).ravel()
    hits = (labels[None, :] == np.arange(k)[:, None]).astype(np.float64)
    counts = np.bincount(flat, minlength=k * n_bins).reshape(k, n_bins)
    prob_sum = np.bincount(
        flat, weights=probs.T.ravel(), minlength=k * n_bins
    ).reshape(k, n_bins)
    hit_sum = np.bincount(
        flat, weights=hits.ravel(), minlength=k * n_bins
    ).reshape(k, n_bins)
    return counts, prob_sum, hit_sum


def ece(probs, labels, n_bins=15):
    """Expected calibration error over top-1 confidence.

    Sum over bins of (bin count / N) * |bin accuracy - bin mean confidence|.
    """
    probs = check_prob_matrix(probs)
    labels = as_labels(labels, probs.shape[1], probs.shape[0], name="labels")
    n_bins = _check_bins(n_bins)
    counts, conf_sum, acc_sum = _top_stats(probs, labels, n_bins)
    n = probs.shape[0]
    terms = [
        (counts[m] / n) * abs(acc_sum[m] / counts[m] - conf_sum[m] / counts[m])
        for m in range(n_bins)
        if counts[m] > 0
    ]
    return float(math.fsum(terms))


def classwise_ece(probs, labels, n_bins=15):
    """Classwise expected calibration error.

    For each class j, bin the class-j probabilities and compare the class's
    empirical frequency in the bin against its mean predicted probability;
    average the count-weighted absolute gaps over classes.
    """
    probs = check_prob_matrix(probs)
    labels = as_labels(labels, probs.shape[1], probs.shape[0], name="labels")
    n_bins = _check_bins(n_bins)
    counts, prob_sum, hit_sum = _classwise_stats(probs, labels, n_bins)
    n, k = probs.shape
    terms = [
        (counts[j, m] / n)
        * abs(hit_sum[j, m] / counts[j, m] - prob_sum[j, m] / counts[j, m])
        for j in range(k)
        for m in range(n_bins)
        if counts[j, m] > 0
    ]
    return float(math.fsum(terms)) / k


def brier(probs, labels):
    """Mean squared error against one-hot labels, normalized by N * k.

    Bounded by 2 / k; 0 only for a perfect one-hot predictor.
    """
    probs = check_prob_matrix(probs)
    labels = as_labels(labels, probs.shape[1], probs.shape[0], name="labels")
    n, k = probs.shape
    diff = probs.copy()
    diff[np.arange(n), labels] -= 1.0
    total = math.fsum((diff**2).ravel())
    return total / (n * k)


def nll_metric(probs, labels):
    """Mean negative log-likelihood with probabilities floored at 1e-12."""
    probs = check_prob_matrix(probs)
    labels = as_labels(labels, probs.shape[1], probs.shape[0], name="labels")
    n = probs.shape[0]
    p = np.maximum(probs[np.arange(n), labels], NLL_PROB_FLOOR)
    return math.fsum(-np.log(p)) / n


def accuracy_topk(probs, labels, k=1):
    """Fraction of samples whose label is among the k largest probabilities.

    Ties are broken toward the lowest class index, matching the
    deterministic sort used everywhere else in the package.
    """
    probs = check_prob_matrix(probs)
    labels = as_labels(labels, probs.shape[1], probs.shape[0], name="labels")
    k = int(k)
    if not 1 <= k <= probs.shape[1]:
        raise InvalidInputError(
            f"k must be in [1, {probs.shape[1]}], got {k}"
        )
    top = np.argsort(-probs, axis=1, kind="stable")[:, :k]
    hits = np.any(top == labels[:, None], axis=1)
    return float(np.count_nonzero(hits)) / probs.shape[0]


@dataclass(frozen=True)
class BinRecord:
    """One reliability-diagram bin.

    ``conf`` and ``acc`` are the bin's mean confidence and accuracy (0 when
    the bin is empty) and ``gap = acc - conf``, scaled by ``count / N`` in
    weighted diagrams. The bin covers (lo, hi]: the right edge belongs to
    the bin.
    """

    index: int
    lo: float
    hi: float
    count: int
    conf: float
    acc: float
    gap: float


def reliability_diagram(probs, labels, n_bins=15, weighted=False):
    """Per-bin reliability records over top-1 confidence.

    Returns one :class:`BinRecord` per bin, empty bins included, so counts
    always sum to N. With ``weighted`` the gap is scaled by the bin's sample
    share, making the records sum to a signed version of ece.
    """
    probs = check_prob_matrix(probs)
    labels = as_labels(labels, probs.shape[1], probs.shape[0], name="labels")
    n_bins = _check_bins(n_bins)
    counts, conf_sum, acc_sum = _top_stats(probs, labels, n_bins)
    n = probs.shape[0]
    records = []
    for m in range(n_bins):
        count = int(counts[m])
        conf = conf_sum[m] / count if count else 0.0
        acc = acc_sum[m] / count if count else 0.0
        gap = acc - conf
        if weighted:
            gap *= count / n
        records.append(
            BinRecord(
                index=m,
                lo=m / n_bins,
                hi=(m + 1) / n_bins,
                count=count,
                conf=float(conf),
                acc=float(acc),
                gap=float(gap),
            )
        )
    return records


def debiased_ece(probs, labels, n_bins=15):
    """Debiased L2 calibration error over top-1 confidence.

    Plugin squared gaps per bin minus the within-bin accuracy sampling
    variance ``acc (1 - acc) / (count - 1)``; bins with fewer than two
    samples contribute nothing. The weighted sum is clamped at zero before
    the square root, since the correction can overshoot on small samples.
    """
    probs = check_prob_matrix(probs)
    labels = as_labels(labels, probs.shape[1], probs.shape[0], name="labels")
    n_bins = _check_bins(n_bins)
    counts, conf_sum, acc_sum = _top_stats(probs, labels, n_bins)
    n = probs.shape[0]
    terms = []
    for m in range(n_bins):
        c = counts[m]
        if c <= 1:
            continue
        acc = acc_sum[m] / c
        conf = conf_sum[m] / c
        terms.append((c / n) * ((acc - conf) ** 2 - acc * (1.0 - acc) / (c - 1)))
    return math.sqrt(max(math.fsum(terms), 0.0))


def marginal_ce(probs, labels, n_bins=15):
    """Debiased L2 analogue of classwise_ece.

    Same construction as :func:`debiased_ece` applied per class probability
    column, averaged over classes before the square root.
    """
    probs = check_prob_matrix(probs)
    labels = as_labels(labels, probs.shape[1], probs.shape[0], name="labels")
    n_bins = _check_bins(n_bins)
    counts, prob_sum, hit_sum = _classwise_stats(probs, labels, n_bins)
    n, k = probs.shape
    terms = []
    for j in range(k):
        for m in range(n_bins):
            c = counts[j, m]
            if c <= 1:
                continue
            freq = hit_sum[j, m] / c
            mp = prob_sum[j, m] / c
            terms.append(
                (c / n) * ((freq - mp) ** 2 - freq * (1.0 - freq) / (c - 1))
            )
    return math.sqrt(max(math.fsum(terms) / k, 0.0))


@dataclass
class MetricReport:
    """Named metric values plus optional reliability bins."""

    values: dict
    bins: list = field(default_factory=list)
    classwise_bins: list | None = None

    def to_json(self):
        """Flat JSON object of the metric values."""
        return json.dumps(
            {name: self.values[name] for name in sorted(self.values)},
            indent=2,
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text):
        values = json.loads(text)
        if not isinstance(values, dict):
            raise DataFormatError("metric report must be a JSON object")
        return cls(values={str(k): float(v) for k, v in values.items()})


def compute_report(probs, labels, metrics=METRIC_NAMES, n_bins=15, topk=5):
    """Evaluate the requested metrics and bundle them with diagram bins."""
    probs = check_prob_matrix(probs)
    labels = as_labels(labels, probs.shape[1], probs.shape[0], name="labels")
    topk = min(int(topk), probs.shape[1])
    values = {}
    for name in metrics:
        if name == "ece":
            values[name] = ece(probs, labels, n_bins)
        elif name == "classwise_ece":
            values[name] = classwise_ece(probs, labels, n_bins)
        elif name == "nll":
            values[name] = nll_metric(probs, labels)
        elif name == "brier":
            values[name] = brier(probs, labels)
        elif name == "accuracy":
            values[name] = accuracy_topk(probs, labels, 1)
        elif name == "topk_accuracy":
            values[name] = accuracy_topk(probs, labels, topk)
        elif name == "debiased_ece":
            values[name] = debiased_ece(probs, labels, n_bins)
        elif name == "marginal_ce":
            values[name] = marginal_ce(probs, labels, n_bins)
        else:
            raise InvalidInputError(
                f"unknown metric {name!r}; choose from {METRIC_NAMES}"
            )
    return MetricReport(
        values=values, bins=reliability_diagram(probs, labels, n_bins)
    )


def bins_to_csv(records):
    """Serialize bin records to CSV text with the fixed header."""
    lines = [BIN_CSV_HEADER]
    for r in records:
        lines.append(
            ",".join(
                [
                    "%.17g" % r.lo,
                    "%.17g" % r.hi,
                    str(int(r.count)),
                    "%.17g" % r.conf,
                    "%.17g" % r.acc,
                    "%.17g" % r.gap,
                ]
            )
        )
    return "\n".join(lines) + "\n"


def bins_from_csv(text):
    """Parse CSV text produced by :func:`bins_to_csv`."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != BIN_CSV_HEADER:
        raise DataFormatError(
            f"bad header, expected {BIN_CSV_HEADER!r}", line=1
        )
    records = []
    for i, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != 6:
            raise DataFormatError(f"expected 6 fields, got {len(parts)}", line=i)
        try:
            records.append(
                BinRecord(
                    index=i - 2,
                    lo=float(parts[0]),
                    hi=float(parts[1]),
                    count=int(parts[2]),
                    conf=float(parts[3]),
                    acc=float(parts[4]),
                    gap=float(parts[5]),
                )
            )
        except ValueError as exc:
            raise DataFormatError(str(exc), line=i) from None
    return records
