'''
Tests for the learning-rate schedule, training loops, providers and history files.
'''

import json

import numpy as np
import pytest
import torch

from attention_providers import (NoAttention, OracleObjectAttention, PredictedPatchAttention,
                                 make_attention_provider)
from attn_generator import AttentionMapGenerator, GeneratorConfig
from exceptions import CheckpointError, ConfigError, DatasetFormatError
from mini_vlm import MiniVLM, load_vlm, save_vlm
from training import (TrainConfig, TrainHistory, generate_records, generator_validation, lr_schedule,
                      train_generator, train_vlm, vlm_validation_loss)

SMALL_GENERATOR = GeneratorConfig(dim=16, num_heads=2, num_layers=1)


def quick_config(**overrides):
    values = dict(lr=1e-3, batch_size=4, epochs=2, step_size=1, gamma=0.5, seed=0, patience=5,
                  encoder_warm_epochs=1)
    values.update(overrides)
    return TrainConfig(**values)


# -------------------------------------------------------------------------------------------------
# Schedule and config
# -------------------------------------------------------------------------------------------------

class TestLrSchedule:
    '''Step decay by gamma every step_size epochs.'''

    def test_exact_values(self):
        assert lr_schedule(1e-4, 0) == 1e-4
        assert lr_schedule(1e-4, 49) == 1e-4
        assert lr_schedule(1e-4, 50) == 1e-5
        assert lr_schedule(1e-4, 100) == 1e-6

    def test_non_increasing(self):
        values = [lr_schedule(1e-4, epoch) for epoch in range(300)]
        assert all(a >= b for a, b in zip(values, values[1:]))

    def test_bad_arguments(self):
        with pytest.raises(ValueError):
            lr_schedule(1e-4, -1)
        with pytest.raises(ValueError):
            lr_schedule(1e-4, 0, step_size=0)


class TestTrainConfig:
    '''TrainConfig.validate.'''

    def test_defaults_are_valid(self):
        config = TrainConfig().validate()
        assert (config.lr, config.batch_size, config.step_size, config.gamma) == (1e-4, 32, 50, 0.1)

    @pytest.mark.parametrize("overrides", [
        {"lr": 0.0},
        {"batch_size": 0},
        {"epochs": -1},
        {"gamma": 0.0},
        {"patience": 0},
        {"attention_source": "sideways"},
    ])
    def test_invalid(self, overrides):
        with pytest.raises(ConfigError):
            TrainConfig(**overrides).validate()


# -------------------------------------------------------------------------------------------------
# Providers
# -------------------------------------------------------------------------------------------------

class TestAttentionProviders:
    '''Patch map sources.'''

    def test_none_gives_no_maps(self, corpus):
        assert make_attention_provider("none").maps(corpus[:2]) is None

    def test_oracle_covers_gt_box(self, corpus):
        provider = make_attention_provider("oracle-object")
        assert isinstance(provider, OracleObjectAttention)
        for clip in corpus:
            patch_map = provider.map_for(clip)
            assert patch_map.grid.shape == (8, 8)
            assert patch_map.grid.sum() >= 1
            cx, cy = clip.gt_box.center
            assert patch_map.grid[min(int(cy // 8), 7), min(int(cx // 8), 7)] == 1

    def test_predicted_needs_generator(self):
        with pytest.raises(CheckpointError):
            make_attention_provider("predicted-patch")

    def test_unknown_source(self):
        with pytest.raises(ConfigError):
            make_attention_provider("sideways")

    def test_predicted_maps_follow_selection(self, seeded, corpus):
        provider = make_attention_provider("predicted-patch", generator=AttentionMapGenerator())
        assert isinstance(provider, PredictedPatchAttention)
        for clip in corpus[:4]:
            selected = provider.selected(clip)
            assert 1 <= len(selected) <= 3
            patch_map = provider.map_for(clip)
            assert patch_map is provider.map_for(clip)
            assert patch_map.grid.sum() >= 1


# -------------------------------------------------------------------------------------------------
# Generator training
# -------------------------------------------------------------------------------------------------

class TestTrainGenerator:
    '''train_generator.'''

    def test_zero_epochs_returns_initial_state(self, corpus):
        model, history = train_generator(quick_config(epochs=0), corpus, SMALL_GENERATOR)
        torch.manual_seed(0)
        fresh = AttentionMapGenerator(SMALL_GENERATOR)
        for name, tensor in fresh.state_dict().items():
            assert torch.equal(model.state_dict()[name], tensor)
        assert history.epochs == [] and history.best_epoch is None

    def test_reproducible_history(self, corpus):
        _, first = train_generator(quick_config(), corpus, SMALL_GENERATOR)
        _, second = train_generator(quick_config(), corpus, SMALL_GENERATOR)
        assert first.to_dict() == second.to_dict()
        assert len(first.epochs) == 2
        assert [e["lr"] for e in first.epochs] == [1e-3, 5e-4]

    def test_validation_accuracies(self, seeded, corpus):
        result = generator_validation(AttentionMapGenerator(SMALL_GENERATOR), corpus)
        assert set(result) == {"iou", "ce", "total", "top1", "top3"}
        assert 0.0 <= result["top1"] <= result["top3"] <= 1.0
        assert result["total"] == pytest.approx(result["iou"] + result["ce"], rel=1e-6)

    def test_early_stopping(self, corpus, monkeypatch):
        flat = {"iou": 1.0, "ce": 1.0, "total": 2.0, "top1": 0.5, "top3": 0.9}
        monkeypatch.setattr("training.generator_validation", lambda model, clips: dict(flat))
        _, history = train_generator(quick_config(epochs=10, patience=2), corpus, SMALL_GENERATOR)
        assert history.stopped_early
        assert len(history.epochs) == 3
        assert history.best_epoch == 0

    def test_empty_dataset(self):
        with pytest.raises(DatasetFormatError):
            train_generator(quick_config(), [], SMALL_GENERATOR)


# -------------------------------------------------------------------------------------------------
# Explainer training
# -------------------------------------------------------------------------------------------------

class TestTrainVlm:
    '''train_vlm and its evaluation helpers.'''

    def test_provider_mismatch(self, corpus, small_vlm_config):
        with pytest.raises(ConfigError):
            train_vlm(quick_config(attention_source="oracle-object"), corpus, NoAttention(), small_vlm_config)

    def test_zero_epochs_returns_initial_state(self, corpus, small_vlm_config):
        model, history = train_vlm(quick_config(epochs=0), corpus, NoAttention(), small_vlm_config)
        torch.manual_seed(0)
        fresh = MiniVLM(small_vlm_config)
        for name, tensor in fresh.state_dict().items():
            assert torch.equal(model.state_dict()[name], tensor)
        assert history.best_epoch is None

    def test_reproducible_with_masking(self, corpus, small_vlm_config):
        config = quick_config(attention_source="oracle-object")
        _, first = train_vlm(config, corpus, OracleObjectAttention(), small_vlm_config)
        _, second = train_vlm(config, corpus, OracleObjectAttention(), small_vlm_config)
        assert first.to_dict() == second.to_dict()
        assert first.attention_source == "oracle-object"

    def test_encoder_frozen_after_warm_epochs(self, corpus, small_vlm_config):
        model, _ = train_vlm(quick_config(epochs=2, encoder_warm_epochs=1), corpus, NoAttention(), small_vlm_config)
        assert not any(p.requires_grad for p in model.encoder_parameters())
        assert all(p.requires_grad for p in model.qformer.parameters())

    def test_snapshot_metrics(self, corpus, small_vlm_config):
        _, history = train_vlm(quick_config(epochs=1, snapshot_every=1), corpus, NoAttention(), small_vlm_config)
        snapshot = history.epochs[0]["snapshot"]
        assert {"ce_loss", "bleu4", "rouge_l", "cider", "spice_slot", "parse_rate"} <= set(snapshot)

    def test_checkpoint_gives_identical_loss(self, tmp_path, seeded, corpus, small_vlm_config):
        model = MiniVLM(small_vlm_config)
        save_vlm(model, str(tmp_path), step=0, seed=0)
        provider = OracleObjectAttention()
        before = vlm_validation_loss(model, corpus, provider)
        after = vlm_validation_loss(load_vlm(str(tmp_path)), corpus, provider)
        assert before == after

    def test_generate_records(self, seeded, corpus, small_vlm_config):
        records = generate_records(MiniVLM(small_vlm_config), corpus[:3], NoAttention())
        assert [r.clip_id for r in records] == [c.clip_id for c in corpus[:3]]
        assert [r.reference for r in records] == [c.gt_explanation for c in corpus[:3]]
        assert all(r.attention_source == "none" for r in records)


class TestTrainHistory:
    '''history.json and timing.json.'''

    def test_save_splits_timings(self, tmp_path):
        history = TrainHistory(model="mini_vlm", seed=3)
        history.add(0, 1e-4, {"ce": 2.0}, {"ce": 2.1}, seconds=0.5)
        history.add(1, 1e-4, {"ce": 1.5}, {"ce": 1.7}, seconds=0.25)
        history.best_epoch = 1
        history.save(str(tmp_path))
        saved = json.loads((tmp_path / "history.json").read_text())
        assert "timings" not in saved and saved["best_epoch"] == 1
        assert len(saved["epochs"]) == 2
        timing = json.loads((tmp_path / "timing.json").read_text())
        assert timing["total_seconds"] == pytest.approx(0.75)
        assert history.best["validation"]["ce"] == 1.7

    def test_values_are_finite(self, corpus):
        _, history = train_generator(quick_config(epochs=1), corpus, SMALL_GENERATOR)
        entry = history.epochs[0]
        assert all(np.isfinite(v) for v in entry["train"].values())
        assert all(np.isfinite(v) for v in entry["validation"].values())
