"""Tests for the calibration metric suite.

The binned metrics promise bit-for-bit agreement with straightforward
loop-based reimplementations: per-bin statistics accumulate in sample order
and final reductions use compensated summation. The oracles below are those
reimplementations, written with plain python loops; equality is asserted
exactly, not approximately.
"""

import json
import math

import numpy as np
import pytest

from iopcalib.exceptions import DataFormatError, InvalidInputError
from iopcalib.metrics import (
    BIN_CSV_HEADER,
    METRIC_NAMES,
    MetricReport,
    accuracy_topk,
    bins_from_csv,
    bins_to_csv,
    brier,
    classwise_ece,
    compute_report,
    debiased_ece,
    ece,
    marginal_ce,
    nll_metric,
    reliability_diagram,
)


def bin_of(p, n_bins):
    """(0, 1] equal-width bin index: the right edge belongs to the bin."""
    b = int(math.ceil(p * n_bins)) - 1
    return min(max(b, 0), n_bins - 1)


def top_pred(row):
    """Most probable class, lowest index on ties."""
    pred = 0
    for j in range(1, len(row)):
        if row[j] > row[pred]:
            pred = j
    return pred


def top_bin_stats_oracle(probs, labels, n_bins):
    counts = [0] * n_bins
    conf_sum = [0.0] * n_bins
    acc_sum = [0.0] * n_bins
    for i in range(probs.shape[0]):
        conf = max(probs[i])
        b = bin_of(conf, n_bins)
        counts[b] += 1
        conf_sum[b] += conf
        acc_sum[b] += 1.0 if top_pred(probs[i]) == labels[i] else 0.0
    return counts, conf_sum, acc_sum


def ece_oracle(probs, labels, n_bins):
    counts, conf_sum, acc_sum = top_bin_stats_oracle(probs, labels, n_bins)
    n = probs.shape[0]
    terms = []
    for m in range(n_bins):
        if counts[m] > 0:
            terms.append(
                (counts[m] / n)
                * abs(acc_sum[m] / counts[m] - conf_sum[m] / counts[m])
            )
    return math.fsum(terms)


def classwise_stats_oracle(probs, labels, n_bins):
    n, k = probs.shape
    counts = [[0] * n_bins for _ in range(k)]
    prob_sum = [[0.0] * n_bins for _ in range(k)]
    hit_sum = [[0.0] * n_bins for _ in range(k)]
    for j in range(k):
        for i in range(n):
            b = bin_of(probs[i, j], n_bins)
            counts[j][b] += 1
            prob_sum[j][b] += probs[i, j]
            hit_sum[j][b] += 1.0 if labels[i] == j else 0.0
    return counts, prob_sum, hit_sum


def classwise_ece_oracle(probs, labels, n_bins):
    counts, prob_sum, hit_sum = classwise_stats_oracle(probs, labels, n_bins)
    n, k = probs.shape
    terms = []
    for j in range(k):
        for m in range(n_bins):
            if counts[j][m] > 0:
                terms.append(
                    (counts[j][m] / n)
                    * abs(
                        hit_sum[j][m] / counts[j][m]
                        - prob_sum[j][m] / counts[j][m]
                    )
                )
    return math.fsum(terms) / k


def brier_oracle(probs, labels):
    n, k = probs.shape
    terms = []
    for i in range(n):
        for j in range(k):
            target = 1.0 if labels[i] == j else 0.0
            terms.append((probs[i, j] - target) ** 2)
    return math.fsum(terms) / (n * k)


def nll_oracle(probs, labels):
    n = probs.shape[0]
    terms = [-math.log(max(probs[i, labels[i]], 1e-12)) for i in range(n)]
    return math.fsum(terms) / n


def debiased_ece_oracle(probs, labels, n_bins):
    counts, conf_sum, acc_sum = top_bin_stats_oracle(probs, labels, n_bins)
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


def marginal_ce_oracle(probs, labels, n_bins):
    counts, prob_sum, hit_sum = classwise_stats_oracle(probs, labels, n_bins)
    n, k = probs.shape
    terms = []
    for j in range(k):
        for m in range(n_bins):
            c = counts[j][m]
            if c <= 1:
                continue
            freq = hit_sum[j][m] / c
            mp = prob_sum[j][m] / c
            terms.append((c / n) * ((freq - mp) ** 2 - freq * (1.0 - freq) / (c - 1)))
    return math.sqrt(max(math.fsum(terms) / k, 0.0))


def topk_oracle(probs, labels, k):
    hits = 0
    for i in range(probs.shape[0]):
        order = sorted(range(probs.shape[1]), key=lambda j: (-probs[i, j], j))
        if labels[i] in order[:k]:
            hits += 1
    return hits / probs.shape[0]


def random_dataset(rng):
    n = int(rng.integers(1, 101))
    k = int(rng.integers(2, 7))
    probs = rng.dirichlet(np.full(k, float(rng.uniform(0.2, 3.0))), size=n)
    # Salt in exact edge cases: one-hot rows and bin-edge values.
    if n >= 3:
        probs[0] = np.eye(k)[0]
        probs[1] = np.full(k, 1.0 / k)
        probs[1, 0] += 1.0 - probs[1].sum()
    labels = rng.integers(0, k, size=n)
    return probs, labels


class TestOracleEquivalence:
    def test_all_binned_metrics_match_loop_oracles_exactly(self):
        rng = np.random.default_rng(80)
        for trial in range(50):
            probs, labels = random_dataset(rng)
            n_bins = int(rng.integers(1, 21))
            assert ece(probs, labels, n_bins) == ece_oracle(probs, labels, n_bins)
            assert classwise_ece(probs, labels, n_bins) == classwise_ece_oracle(
                probs, labels, n_bins
            )
            assert brier(probs, labels) == brier_oracle(probs, labels)
            assert nll_metric(probs, labels) == nll_oracle(probs, labels)
            assert debiased_ece(probs, labels, n_bins) == debiased_ece_oracle(
                probs, labels, n_bins
            )
            assert marginal_ce(probs, labels, n_bins) == marginal_ce_oracle(
                probs, labels, n_bins
            )
            kk = int(rng.integers(1, probs.shape[1] + 1))
            assert accuracy_topk(probs, labels, kk) == topk_oracle(probs, labels, kk)


class TestHandExamples:
    def test_perfect_one_hot_predictor(self):
        probs = np.eye(3)[[0, 1, 2, 1]]
        labels = np.array([0, 1, 2, 1])
        assert ece(probs, labels) == 0.0
        assert classwise_ece(probs, labels) == 0.0
        assert brier(probs, labels) == 0.0
        assert nll_metric(probs, labels) == 0.0
        assert accuracy_topk(probs, labels, 1) == 1.0

    def test_single_bin_overconfidence(self):
        """Confidence 0.8 with 50% accuracy gaps by 0.3."""
        probs = np.array([[0.8, 0.2], [0.8, 0.2]])
        labels = np.array([0, 1])
        np.testing.assert_allclose(ece(probs, labels), 0.3, rtol=1e-15)

    def test_two_bin_hand_value(self):
        probs = np.array([[0.8, 0.2], [0.3, 0.7]])
        labels = np.array([0, 0])
        # Bins (M=15): 0.8 is alone and correct, 0.7 alone and wrong.
        np.testing.assert_allclose(
            ece(probs, labels), 0.5 * 0.2 + 0.5 * 0.7, rtol=1e-15
        )

    def test_brier_uniform_binary(self):
        probs = np.array([[0.5, 0.5]])
        assert brier(probs, np.array([0])) == 0.25

    def test_nll_uniform_and_floor(self):
        probs = np.full((4, 4), 0.25)
        labels = np.arange(4)
        np.testing.assert_allclose(nll_metric(probs, labels), math.log(4.0), rtol=1e-15)
        hopeless = np.array([[1.0, 0.0]])
        np.testing.assert_allclose(
            nll_metric(hopeless, np.array([1])), -math.log(1e-12), rtol=1e-15
        )

    def test_right_edge_belongs_to_bin(self):
        """With M=5 a confidence of exactly 0.2 lands in bin 0, and 1.0 in
        the top bin."""
        probs = np.array([[0.2, 0.2, 0.2, 0.2, 0.2], [1.0, 0.0, 0.0, 0.0, 0.0]])
        labels = np.array([0, 0])
        records = reliability_diagram(probs, labels, n_bins=5)
        assert records[0].count == 1
        assert records[4].count == 1

    def test_debiased_correction_and_clamp(self):
        """Two samples in one bin, one correct: the variance term 0.25
        overwhelms the squared gap 0.09, so the clamp returns 0."""
        probs = np.array([[0.8, 0.2], [0.8, 0.2]])
        labels = np.array([0, 1])
        assert debiased_ece(probs, labels) == 0.0
        # Both correct: no variance, plain 0.2 gap survives.
        labels_ok = np.array([0, 0])
        np.testing.assert_allclose(debiased_ece(probs, labels_ok), 0.2, rtol=1e-12)

    def test_topk_ties_break_to_lower_index(self):
        probs = np.array([[0.4, 0.4, 0.2]])
        assert accuracy_topk(probs, np.array([0]), 1) == 1.0
        assert accuracy_topk(probs, np.array([1]), 1) == 0.0
        assert accuracy_topk(probs, np.array([1]), 2) == 1.0


class TestClasswiseBlindSpot:
    def test_collapsed_confidences_score_near_zero_classwise(self):
        """Squashing logits toward zero sends every class-probability to
        1/k. The classwise metric then compares 1/k against the class
        frequency (also 1/k on balanced data) and reports almost nothing,
        while the top-1 metric keeps seeing the accuracy-to-confidence gap."""
        rng = np.random.default_rng(81)
        k, n = 4, 2000
        logits = rng.normal(size=(n, k)) * 2.0
        labels = rng.integers(0, k, size=n)
        from scipy.special import softmax

        sharp = softmax(logits, axis=1)
        collapsed = softmax(logits / 1000.0, axis=1)
        assert classwise_ece(collapsed, labels) < classwise_ece(sharp, labels)
        assert classwise_ece(collapsed, labels) < 0.01
        acc = accuracy_topk(collapsed, labels, 1)
        assert abs(ece(collapsed, labels) - abs(acc - 1.0 / k)) < 0.02


class TestReliabilityDiagram:
    def test_counts_cover_every_sample_and_edges_are_uniform(self):
        rng = np.random.default_rng(82)
        probs = rng.dirichlet(np.ones(3), size=200)
        labels = rng.integers(0, 3, size=200)
        records = reliability_diagram(probs, labels, n_bins=12)
        assert len(records) == 12
        assert sum(r.count for r in records) == 200
        for m, r in enumerate(records):
            assert r.index == m
            assert r.lo == m / 12
            assert r.hi == (m + 1) / 12

    def test_empty_bins_are_zeroed(self):
        probs = np.array([[1.0, 0.0]])
        records = reliability_diagram(probs, np.array([0]), n_bins=4)
        for r in records[:-1]:
            assert (r.count, r.conf, r.acc, r.gap) == (0, 0.0, 0.0, 0.0)

    def test_weighted_gaps_sum_to_signed_ece(self):
        rng = np.random.default_rng(83)
        probs = rng.dirichlet(np.ones(4) * 0.5, size=300)
        labels = rng.integers(0, 4, size=300)
        weighted = reliability_diagram(probs, labels, n_bins=15, weighted=True)
        unweighted = reliability_diagram(probs, labels, n_bins=15)
        signed = math.fsum(r.gap for r in weighted)
        ref = math.fsum(
            (r.count / 300) * r.gap for r in unweighted if r.count > 0
        )
        np.testing.assert_allclose(signed, ref, rtol=1e-12, atol=1e-15)
        assert ece(probs, labels) >= abs(signed) - 1e-15


class TestReportAndSerialization:
    def test_compute_report_matches_direct_calls(self):
        rng = np.random.default_rng(84)
        probs = rng.dirichlet(np.ones(5), size=60)
        labels = rng.integers(0, 5, size=60)
        report = compute_report(probs, labels, n_bins=10, topk=3)
        assert set(report.values) == set(METRIC_NAMES)
        assert report.values["ece"] == ece(probs, labels, 10)
        assert report.values["classwise_ece"] == classwise_ece(probs, labels, 10)
        assert report.values["nll"] == nll_metric(probs, labels)
        assert report.values["brier"] == brier(probs, labels)
        assert report.values["accuracy"] == accuracy_topk(probs, labels, 1)
        assert report.values["topk_accuracy"] == accuracy_topk(probs, labels, 3)
        assert len(report.bins) == 10

    def test_topk_is_capped_at_the_class_count(self):
        probs = np.array([[0.6, 0.4]])
        report = compute_report(probs, np.array([1]), topk=5)
        assert report.values["topk_accuracy"] == 1.0

    def test_unknown_metric_rejected(self):
        with pytest.raises(InvalidInputError):
            compute_report(np.array([[1.0, 0.0]]), np.array([0]), metrics=("foo",))

    def test_report_json_roundtrip(self):
        report = MetricReport(values={"ece": 0.125, "nll": 1.5})
        back = MetricReport.from_json(report.to_json())
        assert back.values == report.values
        parsed = json.loads(report.to_json())
        assert parsed == {"ece": 0.125, "nll": 1.5}

    def test_report_json_rejects_non_object(self):
        with pytest.raises(DataFormatError):
            MetricReport.from_json("[1, 2]")

    def test_bins_csv_roundtrip_is_exact(self):
        rng = np.random.default_rng(85)
        probs = rng.dirichlet(np.ones(3), size=97)
        labels = rng.integers(0, 3, size=97)
        records = reliability_diagram(probs, labels, n_bins=7)
        text = bins_to_csv(records)
        assert text.splitlines()[0] == BIN_CSV_HEADER
        back = bins_from_csv(text)
        assert back == records

    def test_bins_csv_error_reports_line_numbers(self):
        with pytest.raises(DataFormatError, match="line 1"):
            bins_from_csv("nope\n")
        good = bins_to_csv(
            reliability_diagram(np.array([[1.0, 0.0]]), np.array([0]), n_bins=2)
        )
        with pytest.raises(DataFormatError, match="line 3"):
            bins_from_csv(good.splitlines()[0] + "\n" + good.splitlines()[1] + "\n1,2\n")
        with pytest.raises(DataFormatError, match="line 2"):
            bins_from_csv(BIN_CSV_HEADER + "\n0,0.5,x,0,0,0\n")


class TestValidation:
    def test_rows_must_sum_to_one(self):
        with pytest.raises(InvalidInputError):
            ece(np.array([[0.9, 0.2]]), np.array([0]))

    def test_labels_must_be_in_range(self):
        with pytest.raises(InvalidInputError):
            ece(np.array([[0.5, 0.5]]), np.array([2]))

    def test_bin_count_must_be_positive(self):
        with pytest.raises(InvalidInputError):
            ece(np.array([[0.5, 0.5]]), np.array([0]), n_bins=0)

    def test_topk_range(self):
        with pytest.raises(InvalidInputError):
            accuracy_topk(np.array([[0.5, 0.5]]), np.array([0]), 3)
