"""Test suite for attention, variance, spectral and landscape diagnostics."""

from unittest.mock import patch

import numpy as np
import pytest
import torch

from analysis import (
    AMPLITUDE_FLOOR,
    AttentionMap,
    LandscapeEvaluator,
    attention_frame,
    attention_map,
    dump_reconstructions,
    feature_map_variance,
    feature_variance,
    filter_normalized_direction,
    fourier_profile,
    hub_patches,
    loss_curve,
    loss_landscape,
    spectral_profile,
    spectrum_frames,
    training_loss,
    variance_frame,
)
from data import SyntheticConfig, generate_synthetic, patchify, read_volume, sample_mask
from errors import GeometryError
from model import build_model
from training import tiny_model_config


def tiny_data(per_class=2, seed=0):
    volumes, labels, _ = generate_synthetic(
        SyntheticConfig(samples_per_class={"train": per_class}, seed=seed)
    )
    return volumes, labels


def box_smooth(x: np.ndarray) -> np.ndarray:
    """Circular [1/4, 1/2, 1/4] filter along each spatial axis of (gx, gy, gz)."""
    for axis in range(3):
        x = 0.25 * np.roll(x, 1, axis) + 0.5 * x + 0.25 * np.roll(x, -1, axis)
    return x


class TestAttentionMaps:
    """Test cases for captured attention probabilities."""

    def setup_method(self):
        self.model = build_model(tiny_model_config(), seed=0)
        self.volumes, _ = tiny_data()

    def test_rows_sum_to_one(self):
        attn = attention_map(self.model, self.volumes, layer=1)

        assert attn.maps.shape == (2, 8, 8)
        np.testing.assert_allclose(attn.maps.sum(axis=-1), 1.0, atol=1e-5)

    def test_capture_is_switched_off_afterwards(self):
        attention_map(self.model, self.volumes)
        assert not self.model.blocks[0].attn.capture
        assert self.model.blocks[0].attn.last_attention is None

    def test_zero_queries_give_uniform_map(self):
        with torch.no_grad():
            self.model.blocks[0].attn.q.weight.zero_()
            self.model.blocks[0].attn.q.bias.zero_()
        attn = attention_map(self.model, self.volumes, layer=0)
        np.testing.assert_allclose(attn.maps, 1 / 8, atol=1e-6)

    def test_identical_batch_equals_single_sample(self):
        single = attention_map(self.model, self.volumes[:1])
        repeated = attention_map(self.model, np.repeat(self.volumes[:1], 3, axis=0))
        np.testing.assert_allclose(repeated.maps, single.maps, atol=1e-6)

    def test_layer_out_of_range(self):
        with pytest.raises(IndexError):
            attention_map(self.model, self.volumes, layer=2)

    def test_frame_has_head_resolved_and_averaged_rows(self):
        frame = attention_frame(attention_map(self.model, self.volumes))

        assert frame.columns.tolist() == ["layer", "head", "row", "col", "value"]
        assert len(frame) == (2 + 1) * 8 * 8
        assert sorted(frame["head"].unique()) == [-1, 0, 1]


class TestHubPatches:
    """Test cases for column-sum hub ranking."""

    def test_hand_computed_column_sums(self):
        matrix = np.tile([0.3, 0.5, 0.2], (3, 1))
        report = hub_patches(matrix, 3, (3, 1, 1))

        assert [e.patch for e in report.entries] == [1, 0, 2]
        assert [e.score for e in report.entries] == pytest.approx([1.5, 0.9, 0.6])
        assert report.entries[0].coords == (1, 0, 0)
        assert report.entries[0].rank == 1

    def test_ties_break_on_lower_index(self):
        report = hub_patches(np.ones((4, 4)), 3, (4, 1, 1))
        assert [e.patch for e in report.entries] == [0, 1, 2]

    def test_coordinates_are_x_major(self):
        matrix = np.full((125, 125), 1 / 125)
        matrix[:, 31] += 0.5
        report = hub_patches(matrix, 1, (5, 5, 5))
        assert report.entries[0].patch == 31
        assert report.entries[0].coords == (1, 1, 1)

    def test_heads_are_averaged(self):
        maps = np.stack([np.tile([1.0, 0.0], (2, 1)), np.tile([0.0, 1.0], (2, 1))])
        maps[1] *= 3
        report = hub_patches(AttentionMap(0, maps), 1, (2, 1, 1))
        assert report.entries[0].patch == 1

    def test_row_permutation_leaves_hubs_unchanged(self):
        rng = np.random.default_rng(0)
        matrix = rng.dirichlet(np.ones(8), size=8)
        rows = rng.permutation(8)

        before = hub_patches(matrix, 8, (2, 2, 2))
        after = hub_patches(matrix[rows], 8, (2, 2, 2))

        assert [e.patch for e in after.entries] == [e.patch for e in before.entries]
        assert [e.score for e in after.entries] == pytest.approx([e.score for e in before.entries])

    def test_relabeling_patches_relabels_hubs(self):
        rng = np.random.default_rng(1)
        matrix = rng.dirichlet(np.ones(8), size=8)
        perm = rng.permutation(8)
        relabeled = matrix[np.ix_(perm, perm)]

        before = hub_patches(matrix, 3, (2, 2, 2))
        after = hub_patches(relabeled, 3, (2, 2, 2))

        # new index q holds old patch perm[q]
        assert [perm[e.patch] for e in after.entries] == [e.patch for e in before.entries]
        assert [e.score for e in after.entries] == pytest.approx([e.score for e in before.entries])

    def test_k_out_of_range(self):
        with pytest.raises(ValueError):
            hub_patches(np.ones((4, 4)), 5, (4, 1, 1))
        with pytest.raises(ValueError):
            hub_patches(np.ones((4, 4)), 0, (4, 1, 1))

    def test_non_square_map(self):
        with pytest.raises(GeometryError):
            hub_patches(np.ones((3, 4)), 1, (4, 1, 1))

    def test_frame_columns(self):
        frame = hub_patches(np.ones((8, 8)), 2, (2, 2, 2)).to_frame()
        assert frame.columns.tolist() == ["rank", "patch", "gx", "gy", "gz", "score"]


class TestFeatureVariance:
    """Test cases for per-block feature-map variance."""

    def test_constant_features(self):
        assert feature_map_variance(torch.full((2, 8, 16), 3.0)) == 0.0

    def test_standard_normal_features(self):
        features = torch.randn(4, 125, 64, generator=torch.Generator().manual_seed(0))
        assert feature_map_variance(features) == pytest.approx(1.0, abs=0.05)

    def test_token_order_does_not_matter(self):
        generator = torch.Generator().manual_seed(3)
        features = torch.randn(3, 8, 16, generator=generator) * torch.linspace(0.1, 2.0, 8).view(1, 8, 1)
        shuffled = features[:, torch.randperm(8, generator=generator)]

        assert feature_map_variance(shuffled) == pytest.approx(feature_map_variance(features), rel=1e-12)

    def test_one_value_per_block(self):
        model = build_model(tiny_model_config(), seed=0)
        variances = feature_variance(model, tiny_data()[0])

        assert variances.shape == (2,)
        assert np.all(variances > 0)
        frame = variance_frame(variances)
        assert frame["normalized_depth"].tolist() == [0.5, 1.0]


class TestSpectralProfile:
    """Test cases for the relative log-amplitude spectrum."""

    def test_impulse_is_flat(self):
        features = np.zeros((1, 512, 1))
        features[0, 0, 0] = 1.0
        freqs, log_amp = spectral_profile(features, (8, 8, 8))

        np.testing.assert_allclose(freqs, [0.0, 0.25, 0.5, 0.75, 1.0])
        np.testing.assert_allclose(log_amp, 0.0, atol=1e-12)

    def test_constant_map_has_only_dc(self):
        _, log_amp = spectral_profile(np.ones((1, 8, 3)), (2, 2, 2))
        assert log_amp[0] == 0.0
        assert log_amp[-1] == pytest.approx(np.log(AMPLITUDE_FLOOR))

    def test_smoothing_lowers_high_frequencies(self):
        lower = 0
        for seed in range(100):
            noise = np.random.default_rng(seed).standard_normal((8, 8, 8))
            smooth = box_smooth(noise)
            _, white_amp = spectral_profile(noise.reshape(1, 512, 1), (8, 8, 8))
            _, smooth_amp = spectral_profile(smooth.reshape(1, 512, 1), (8, 8, 8))
            lower += int(smooth_amp[-1] < white_amp[-1])
        assert lower >= 95

    def test_flat_grid_axis(self):
        with pytest.raises(GeometryError):
            spectral_profile(np.ones((1, 4, 1)), (2, 2, 1))

    def test_model_profile_frames(self):
        model = build_model(tiny_model_config(), seed=0)
        profile = fourier_profile(model, tiny_data()[0])

        assert profile.log_amp.shape == (2, len(profile.freqs_over_pi))
        np.testing.assert_array_equal(profile.log_amp[:, 0], 0.0)
        spectrum, delta = spectrum_frames(profile)
        assert spectrum.columns.tolist() == ["block", "freq_over_pi", "log_amp"]
        assert delta.columns.tolist() == ["block", "delta_log_amp"]
        np.testing.assert_array_equal(delta["delta_log_amp"], profile.delta)


class TestLossLandscape:
    """Test cases for filter-normalized loss surfaces."""

    def setup_method(self):
        self.model = build_model(tiny_model_config(), seed=0).double()
        self.model.reset_head(0, 1.0)
        self.volumes, self.labels = tiny_data()

    def test_origin_matches_training_loss(self):
        direct = training_loss(self.model, self.volumes, self.labels, 0.05)
        surface = loss_landscape(self.model, self.volumes, self.labels, steps=3, span=0.5)

        assert surface.values.shape == (3, 3)
        assert surface.values[1, 1] == pytest.approx(direct, rel=1e-6)

    def test_direction_row_norms_match_parameters(self):
        direction = filter_normalized_direction(self.model, seed=0)
        for name, param in self.model.named_parameters():
            if name not in direction:
                continue
            d = direction[name]
            if param.ndim <= 1:
                assert not d.any()
                continue
            p_rows = param.detach().reshape(param.shape[0], -1).norm(dim=1)
            d_rows = d.reshape(param.shape[0], -1).norm(dim=1)
            torch.testing.assert_close(d_rows, p_rows, rtol=1e-6, atol=1e-12)

    def test_directions_skip_pretraining_parts(self):
        direction = filter_normalized_direction(self.model, seed=0)
        assert "patch_embed.weight" in direction
        assert not any(n.startswith(("decoder", "projector", "mask_token")) for n in direction)

    def test_curve_is_the_beta_zero_column(self):
        surface = loss_landscape(self.model, self.volumes, self.labels, steps=5, span=1.0)
        curve = loss_curve(self.model, self.volumes, self.labels, surface.alphas)

        assert surface.betas[2] == 0.0
        np.testing.assert_allclose(curve, surface.values[:, 2], rtol=1e-12)

    def test_parameters_are_restored(self):
        before = {n: p.detach().clone() for n, p in self.model.named_parameters()}
        loss_landscape(self.model, self.volumes, self.labels, steps=3)
        for name, param in self.model.named_parameters():
            assert torch.equal(param, before[name]), name

    def test_non_finite_loss_becomes_inf(self):
        evaluator = LandscapeEvaluator(self.model, self.volumes, self.labels)
        before = self.model.head.weight.detach().clone()
        with patch("analysis.training_loss", return_value=float("nan")):
            assert evaluator.loss_at(0.5, 0.5) == float("inf")
        assert torch.equal(self.model.head.weight, before)

    def test_frame_columns(self):
        frame = loss_landscape(self.model, self.volumes, self.labels, steps=3).to_frame()
        assert frame.columns.tolist() == ["alpha", "beta", "loss"]
        assert len(frame) == 9


class TestReconstructionDump:
    """Test cases for original / masked / reconstruction volumes."""

    def test_written_volumes(self, tmp_path):
        model = build_model(tiny_model_config(), seed=0)
        volumes, _ = tiny_data(per_class=1)
        parts = [sample_mask(8, 0.5, seed=i) for i in range(2)]

        frame = dump_reconstructions(model, volumes, parts, tmp_path)

        assert frame.columns.tolist() == ["sample", "masked_mse"]
        assert (tmp_path / "reconstructions.csv").exists()
        for i, part in enumerate(parts):
            original = read_volume(tmp_path / f"sample_{i:03d}_original.vol")
            masked = read_volume(tmp_path / f"sample_{i:03d}_masked.vol")
            rebuilt = read_volume(tmp_path / f"sample_{i:03d}_reconstruction.vol")
            assert original.dims == masked.dims == rebuilt.dims == (20, 20, 20)

            masked_tokens = patchify(masked, 10).data
            assert not masked_tokens[part.masked_idx].any()
            np.testing.assert_array_equal(
                masked_tokens[part.visible_idx], patchify(original, 10).data[part.visible_idx]
            )

            diff = patchify(rebuilt, 10).data[part.masked_idx].astype(np.float64) - patchify(
                original, 10
            ).data[part.masked_idx].astype(np.float64)
            assert frame["masked_mse"][i] == pytest.approx(np.mean(diff**2), rel=1e-9)
