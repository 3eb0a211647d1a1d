"""Test suite for the pretraining and fine-tuning loops."""

import numpy as np
import pandas as pd
import pytest

from data import SyntheticConfig, generate_synthetic
from errors import ConfigError
from model import build_model
from training import (
    FinetuneConfig,
    PretrainConfig,
    compare_convergence,
    evaluate,
    finetune,
    pretrain,
    restore_encoder,
    tiny_model_config,
)
from utils import RunState


def synthetic(per_class, seed=0, **overrides):
    cfg = SyntheticConfig(samples_per_class=per_class, seed=seed, **overrides)
    volumes, labels, index = generate_synthetic(cfg)
    splits = np.array([e.split for e in index.entries])
    return {s: (volumes[splits == s], labels[splits == s]) for s in per_class}


class TestPretrain:
    """Test cases for the masked-reconstruction loop."""

    def setup_method(self):
        self.volumes = synthetic({"train": 2})["train"][0]

    def short_run(self, mode="cscrl", **overrides):
        cfg = PretrainConfig(
            epochs=5, warmup_epochs=1, batch_size=2, base_lr=1e-3, max_steps=5, mode=mode, **overrides
        )
        return pretrain(self.volumes, cfg, build_model(tiny_model_config(mode), seed=0))

    def test_equal_seeds_give_identical_histories(self):
        a = self.short_run()
        b = self.short_run()

        assert len(a.history) == 5
        pd.testing.assert_frame_equal(a.history, b.history, check_exact=True)

    def test_history_columns_and_steps(self):
        result = self.short_run()
        for column in ("epoch", "step", "lr", "L_pixel", "L_c", "L_nc", "L_all", "sigma_g1", "sigma_g2"):
            assert column in result.history.columns
        assert result.history["step"].tolist() == [1, 2, 3, 4, 5]
        assert result.epochs_run == 3
        assert result.session.state == RunState.COMPLETED

    def test_mae_history_has_no_gram_terms(self):
        result = self.short_run("mae")
        assert (result.history["L_c"] > 0).all()
        assert (result.history["L_nc"] == 0).all()
        assert result.history["sigma_g2"].isna().all()
        assert np.allclose(result.history["L_all"], result.history["L_pixel"])

    def test_history_file(self, tmp_path):
        cfg = PretrainConfig(epochs=2, warmup_epochs=1, batch_size=4, max_steps=2)
        pretrain(self.volumes, cfg, build_model(tiny_model_config()), history_path=tmp_path / "h.csv")

        frame = pd.read_csv(tmp_path / "h.csv")
        assert frame.columns.tolist() == ["epoch", "step", "lr", "L_pixel", "L_c", "L_nc", "L_all"]

    def test_mode_mismatch(self):
        cfg = PretrainConfig(epochs=2, warmup_epochs=1, mode="mae")
        with pytest.raises(ConfigError):
            pretrain(self.volumes, cfg, build_model(tiny_model_config("cscrl")))

    def test_empty_dataset(self):
        cfg = PretrainConfig(epochs=2, warmup_epochs=1)
        with pytest.raises(ConfigError):
            pretrain(self.volumes[:0], cfg, build_model(tiny_model_config()))

    def test_compare_convergence_frame(self):
        cfg = PretrainConfig(epochs=2, warmup_epochs=1, batch_size=2, max_steps=3)
        frame = compare_convergence(self.volumes, cfg, tiny_model_config())

        assert frame.columns.tolist() == ["step", "mode", "L_pixel"]
        assert frame["mode"].tolist() == ["cscrl"] * 3 + ["mae"] * 3

    @pytest.mark.slow
    @pytest.mark.parametrize("mode", ["cscrl", "mae"])
    def test_pixel_loss_halves_within_200_steps(self, mode):
        volumes = synthetic({"train": 16})["train"][0]
        cfg = PretrainConfig(
            epochs=50, warmup_epochs=2, batch_size=8, base_lr=1e-3, max_steps=200, mode=mode, log_every=50
        )
        history = pretrain(volumes, cfg, build_model(tiny_model_config(mode), seed=0)).history

        assert len(history) == 200
        assert history["L_pixel"].iloc[-1] <= 0.5 * history["L_pixel"].iloc[0]
        if mode == "cscrl":
            assert history["sigma_g1"].iloc[-1] - history["sigma_g1"].iloc[0] >= 0.1
            # G₂ keeps its nonnegative diagonal, so with two visible tokens mean σ(G₂) bottoms out near 0.5
            assert history["sigma_g2"].iloc[-1] <= history["sigma_g2"].iloc[0] + 1e-3


class TestFinetune:
    """Test cases for supervised fine-tuning."""

    def setup_method(self):
        self.data = synthetic({"train": 4, "val": 2})

    def short_cfg(self, **overrides):
        values = dict(epochs=3, warmup_epochs=1, batch_size=4, seed=0)
        values.update(overrides)
        return FinetuneConfig(**values)

    def test_history_and_best_epoch(self):
        result = finetune(self.data["train"], self.data["val"], self.short_cfg(), tiny_model_config())

        assert result.history.columns.tolist() == ["epoch", "lr", "train_loss", "val_acc", "val_auc"]
        assert len(result.history) == 3
        best = result.history.iloc[result.best_epoch]
        assert best["val_acc"] == result.best_metrics.acc
        assert best["val_acc"] == result.history["val_acc"].max()

    def test_returned_model_carries_best_weights(self):
        result = finetune(self.data["train"], self.data["val"], self.short_cfg(), tiny_model_config())
        assert evaluate(result.model, *self.data["val"]).acc == result.best_metrics.acc

    def test_pretrained_encoder_is_loaded(self):
        pretrained = build_model(tiny_model_config(), seed=7)
        tensors = pretrained.state_dict()
        cfg = self.short_cfg(epochs=2, base_lr=1e-12)

        result = finetune(self.data["train"], self.data["val"], cfg, tiny_model_config(), checkpoint=tensors)

        np.testing.assert_allclose(
            result.model.patch_embed.weight.detach().numpy(),
            pretrained.patch_embed.weight.detach().numpy(),
            atol=1e-6,
        )

    def test_restore_encoder_ignores_decoder(self):
        model = build_model(tiny_model_config(), seed=0)
        source = build_model(tiny_model_config(), seed=1)
        before = model.decoder_pred.weight.detach().clone()

        restore_encoder(model, source.state_dict())

        assert (model.decoder_pred.weight == before).all()
        assert (model.blocks[0].attn.q.weight == source.blocks[0].attn.q.weight).all()

    def test_label_out_of_range(self):
        x, y = self.data["train"]
        with pytest.raises(ConfigError):
            finetune((x, y + 1), self.data["val"], self.short_cfg(), tiny_model_config())

    @pytest.mark.slow
    def test_overfits_sixteen_samples(self):
        train = synthetic({"train": 8}, seed=2)["train"]
        cfg = FinetuneConfig(
            epochs=100, warmup_epochs=5, batch_size=4, mixup_alpha=0.0, dropout=0.0, seed=0
        )
        result = finetune(train, train, cfg, tiny_model_config())

        assert result.best_metrics.acc == 1.0

    @pytest.mark.slow
    def test_pretrain_then_finetune_classifies_planted_covariance(self):
        # region signal well above the per-voxel noise after the patch embedding
        data = synthetic(
            {"train": 300, "val": 50, "test": 100},
            seed=0,
            rho=0.999,
            variance=0.04,
            radius=4,
            noise_std=0.01,
        )
        model_cfg = tiny_model_config()

        pretrained = pretrain(
            data["train"][0],
            PretrainConfig(epochs=300, warmup_epochs=40, base_lr=1e-3, log_every=500),
            build_model(model_cfg, seed=0),
        ).model
        result = finetune(
            data["train"],
            data["val"],
            FinetuneConfig(epochs=50, warmup_epochs=5, mixup_alpha=0.0, dropout=0.0),
            model_cfg,
            checkpoint=pretrained.state_dict(),
        )
        metrics = evaluate(result.model, *data["test"])

        assert len(data["test"][1]) == 200
        assert metrics.acc >= 0.85
