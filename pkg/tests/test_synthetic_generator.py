"""Test suite for the planted-connectome synthetic generator."""

import numpy as np
import pytest
from scipy import stats
from sklearn.linear_model import LogisticRegression
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

from data import (
    SyntheticConfig,
    default_covariances,
    default_region_centers,
    generate_synthetic,
    region_means,
)
from errors import ConfigError


def quadratic_features(means: np.ndarray, center: float = 0.5) -> np.ndarray:
    """Pairwise products of centered region means (upper triangle, diagonal included)."""
    centered = means - center
    rows, cols = np.triu_indices(means.shape[1])
    return centered[:, rows] * centered[:, cols]


class TestDefaults:
    """Test cases for default covariances and region placement."""

    def test_covariances_share_diagonal_and_differ_off_diagonal(self):
        sigma0, sigma1 = default_covariances(4)

        np.testing.assert_allclose(np.diag(sigma0), np.diag(sigma1))
        assert sigma0[0, 3] > 0
        assert sigma1[0, 3] < 0
        assert sigma1[0, 1] > 0

    def test_covariances_are_positive_definite(self):
        for sigma in default_covariances(4, rho=0.999):
            assert np.linalg.eigvalsh(sigma).min() > 0

    def test_region_centers_are_distinct_corners(self):
        centers = default_region_centers((20, 20, 20), 4)
        assert centers == [(5, 5, 5), (5, 5, 14), (5, 14, 5), (5, 14, 14)]

    def test_region_centers_fall_in_distinct_patches(self):
        centers = default_region_centers((20, 20, 20), 4)
        patches = {tuple(c // 10 for c in center) for center in centers}
        assert len(patches) == 4


class TestGenerateSynthetic:
    """Test cases for volume generation."""

    def test_balanced_labels_and_voxel_range(self):
        volumes, labels, index = generate_synthetic(
            SyntheticConfig(samples_per_class={"train": 2}, seed=0)
        )

        assert volumes.shape == (4, 20, 20, 20, 1)
        assert volumes.dtype == np.float32
        assert labels.tolist() == [0, 0, 1, 1]
        assert volumes.min() >= 0.0 and volumes.max() <= 1.0
        assert [e.id for e in index.entries] == [f"sample_{i:05d}" for i in range(4)]

    def test_same_config_is_bit_identical(self):
        cfg = SyntheticConfig(samples_per_class={"train": 3, "test": 1}, seed=9)
        a, _, _ = generate_synthetic(cfg)
        b, _, _ = generate_synthetic(cfg)
        assert a.tobytes() == b.tobytes()

    def test_different_seeds_differ(self):
        a, _, _ = generate_synthetic(SyntheticConfig(samples_per_class={"train": 1}, seed=0))
        b, _, _ = generate_synthetic(SyntheticConfig(samples_per_class={"train": 1}, seed=1))
        assert not np.array_equal(a, b)

    def test_split_order(self):
        _, labels, index = generate_synthetic(
            SyntheticConfig(samples_per_class={"train": 2, "val": 1, "test": 1})
        )
        assert [e.split for e in index.entries] == ["train"] * 4 + ["val"] * 2 + ["test"] * 2
        assert labels.tolist() == [0, 0, 1, 1, 0, 1, 0, 1]

    def test_domain_offset_shifts_intensities(self):
        base = SyntheticConfig(samples_per_class={"train": 2}, noise_std=0.0)
        shifted = SyntheticConfig(samples_per_class={"train": 2}, noise_std=0.0, domain_offset=0.1)

        a, _, _ = generate_synthetic(base)
        b, _, _ = generate_synthetic(shifted)

        assert b.mean() > a.mean()

    def test_empirical_region_covariance_matches_planted(self):
        """Monte-Carlo: per-class covariance of region means recovers Σ_k."""
        cfg = SyntheticConfig(samples_per_class={"train": 1000}, seed=0)
        volumes, labels, _ = generate_synthetic(cfg)
        means = region_means(volumes, cfg)

        for k, sigma in enumerate(cfg.resolved_covariances()):
            empirical = np.cov(means[labels == k], rowvar=False)
            assert np.abs(empirical - sigma).max() < 0.005

    @pytest.mark.parametrize(
        "overrides",
        [{}, {"variance": 0.04, "radius": 4, "noise_std": 0.01}],
    )
    def test_quadratic_features_separate_the_classes(self, overrides):
        """Logistic regression on centered region-mean products is a feasible oracle."""
        cfg = SyntheticConfig(
            samples_per_class={"train": 200, "test": 100}, rho=0.999, seed=1, **overrides
        )
        volumes, labels, index = generate_synthetic(cfg)
        features = quadratic_features(region_means(volumes, cfg))
        splits = np.array([e.split for e in index.entries])

        clf = make_pipeline(StandardScaler(), LogisticRegression(max_iter=5000))
        clf.fit(features[splits == "train"], labels[splits == "train"])
        accuracy = clf.score(features[splits == "test"], labels[splits == "test"])

        assert accuracy >= 0.95

    def test_region_intensities_follow_the_planted_normal(self):
        """Chi-square goodness of fit of one region's intensity across sample indices."""
        cfg = SyntheticConfig(samples_per_class={"train": 1000}, noise_std=0.0, seed=3)
        volumes, labels, _ = generate_synthetic(cfg)
        means = region_means(volumes, cfg)
        edges = stats.norm.ppf(np.linspace(0.0, 1.0, 11)[1:-1])

        for k in (0, 1):
            z = (means[labels == k, 0] - cfg.mean) / np.sqrt(cfg.variance)
            counts = np.bincount(np.searchsorted(edges, z), minlength=10)
            _, p_value = stats.chisquare(counts)
            assert p_value > 1e-3, k

    def test_consecutive_samples_are_uncorrelated(self):
        cfg = SyntheticConfig(samples_per_class={"train": 1000}, noise_std=0.0, seed=4)
        volumes, labels, _ = generate_synthetic(cfg)
        z = region_means(volumes, cfg)[labels == 0, 0]

        lag_one = np.corrcoef(z[:-1], z[1:])[0, 1]
        assert abs(lag_one) < 4 / np.sqrt(len(z))

    def test_variance_and_rho_feed_the_default_covariances(self):
        cfg = SyntheticConfig(variance=0.04, rho=0.999)
        for got, expected in zip(cfg.resolved_covariances(), default_covariances(4, 0.04, 0.999)):
            np.testing.assert_array_equal(got, expected)

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"num_regions": 1},
            {"noise_std": -0.1},
            {"samples_per_class": {"holdout": 2}},
            {"radius": 9},
            {"centers": [(0, 0, 0)] * 4},
            {"covariances": (np.eye(4), -np.eye(4))},
            {"samples_per_class": {"train": 0}},
            {"variance": 0.0},
            {"rho": 1.5},
        ],
    )
    def test_invalid_configs_raise(self, kwargs):
        with pytest.raises(ConfigError):
            generate_synthetic(SyntheticConfig(**kwargs))
