"""Test suite for classification metrics."""

import numpy as np
import pytest

from errors import MetricError
from training import compute_metrics, metrics_from_counts


def pairwise_auc(labels: np.ndarray, scores: np.ndarray) -> float:
    """Fraction of positive/negative pairs ordered correctly, ties counted half."""
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return wins / (len(pos) * len(neg))


class TestConfusionMetrics:
    """Test cases for ACC / SEN / SPE from thresholded scores."""

    def test_hand_counted_fixture(self):
        labels = [1, 1, 1, 0, 0, 0]
        scores = [0.9, 0.8, 0.2, 0.1, 0.3, 0.4]

        metrics = compute_metrics(labels, scores)

        assert (metrics.tp, metrics.fn, metrics.tn, metrics.fp) == (2, 1, 3, 0)
        assert metrics.acc == pytest.approx(5 / 6)
        assert metrics.sen == pytest.approx(2 / 3)
        assert metrics.spe == 1.0

    def test_threshold_is_inclusive(self):
        metrics = compute_metrics([1, 0], [0.5, 0.49])
        assert metrics.tp == 1 and metrics.tn == 1

    def test_from_counts(self):
        metrics = metrics_from_counts(tp=4, fp=1, tn=3, fn=2)
        assert metrics.acc == pytest.approx(0.7)
        assert metrics.sen == pytest.approx(4 / 6)
        assert metrics.spe == pytest.approx(0.75)

    def test_to_dict_fields(self):
        metrics = compute_metrics([0, 1], [0.2, 0.7])
        assert set(metrics.to_dict()) == {"acc", "sen", "spe", "auc", "tp", "fp", "tn", "fn"}


class TestAuc:
    """Test cases for trapezoidal ROC AUC."""

    def test_classic_fixture(self):
        metrics = compute_metrics([0, 0, 1, 1], [0.1, 0.4, 0.35, 0.8])
        assert metrics.auc == pytest.approx(0.75)

    def test_perfect_separation(self):
        assert compute_metrics([0, 0, 1, 1], [0.1, 0.2, 0.8, 0.9]).auc == 1.0

    def test_reversed_scores(self):
        assert compute_metrics([0, 0, 1, 1], [0.9, 0.8, 0.2, 0.1]).auc == 0.0

    def test_all_scores_tied(self):
        assert compute_metrics([0, 1, 0, 1], [0.5] * 4).auc == pytest.approx(0.5)

    def test_matches_pairwise_oracle(self):
        rng = np.random.default_rng(0)
        for trial in range(100):
            n = int(rng.integers(4, 60))
            labels = rng.integers(0, 2, n)
            labels[:2] = [0, 1]
            # coarse rounding forces tied scores
            scores = np.round(rng.random(n), 1 if trial % 2 else 6)

            metrics = compute_metrics(labels, scores)

            assert abs(metrics.auc - pairwise_auc(labels, scores)) < 1e-9

    def test_single_class_split(self):
        with pytest.raises(MetricError):
            compute_metrics([1, 1, 1], [0.2, 0.5, 0.9])

    def test_empty_split(self):
        with pytest.raises(MetricError):
            compute_metrics([], [])
