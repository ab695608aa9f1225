import json
import math

import pytest
import torch

from cope.data import GenConfig, generate_synthetic_corpus
from cope.encoders import TextEncoderConfig, VisualEncoderConfig
from cope.errors import ConfigError
from cope.model import CopeModel, ModelConfig
from cope.trainer import TrainConfig, lr_at, parameter_groups, train


@pytest.fixture(scope="module")
def corpus():
    return generate_synthetic_corpus(
        GenConfig(
            n_products=6,
            n_categories=2,
            pages_per_product=2,
            videos_per_product=2,
            lives_per_product=2,
            video_frames=2,
            live_frames=2,
            image_size=16,
            seed=11,
        )
    )


def model_cfg(n_classes=6):
    return ModelConfig(
        visual=VisualEncoderConfig(
            image_size=16, patch_size=8, embed_dim=16, n_blocks=1, n_heads=2, max_frames=2
        ),
        text=TextEncoderConfig(vocab_size=200, embed_dim=16, n_heads=2, max_len=16),
        n_classes=n_classes,
    )


def train_cfg(**kwargs):
    defaults = dict(
        epochs=2,
        warmup_epochs=1,
        lr_text=1e-3,
        lr_visual=1e-3,
        lr_other=1e-3,
        batch_products=3,
        instances_per_product=2,
        seed=0,
        steps_per_epoch=2,
    )
    defaults.update(kwargs)
    return TrainConfig(**defaults)


class TestSchedule:
    def test_zero_at_step_zero(self):
        assert lr_at(0, 100, 20, 0.5) == pytest.approx(0.0, abs=1e-12)

    def test_max_at_warmup_end(self):
        assert lr_at(20, 100, 20, 0.5) == pytest.approx(0.5, abs=1e-12)

    def test_half_at_cosine_midpoint(self):
        # midpoint of the decay segment: warmup + (total - warmup)/2
        assert lr_at(60, 100, 20, 0.5) == pytest.approx(0.25, abs=1e-12)

    def test_zero_at_final_step(self):
        assert lr_at(100, 100, 20, 0.5) == pytest.approx(0.0, abs=1e-12)

    def test_linear_during_warmup(self):
        for step in range(21):
            assert lr_at(step, 100, 20, 1.0) == pytest.approx(step / 20, abs=1e-12)

    def test_monotone_decay_after_warmup(self):
        values = [lr_at(s, 100, 20, 1.0) for s in range(20, 101)]
        assert all(a >= b for a, b in zip(values, values[1:]))


class TestParameterGroups:
    def test_partition_covers_every_parameter_once(self):
        torch.manual_seed(0)
        model = CopeModel(model_cfg())
        groups = parameter_groups(model, train_cfg())
        grouped = [p for g in groups for p in g["params"]]
        assert len(grouped) == len(list(model.parameters()))
        assert len({id(p) for p in grouped}) == len(grouped)

    def test_group_rates(self):
        torch.manual_seed(0)
        model = CopeModel(model_cfg())
        cfg = train_cfg(lr_text=1e-4, lr_visual=1e-6, lr_other=1e-2)
        groups = parameter_groups(model, cfg)
        assert [g["name"] for g in groups] == ["text", "visual", "other"]
        assert [g["max_lr"] for g in groups] == [1e-4, 1e-6, 1e-2]
        # the non-shared projections, fusion, and classifier are all "other"
        assert len(groups[2]["params"]) > 0


class TestConfigValidation:
    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(epochs=0),
            dict(warmup_epochs=0),
            dict(warmup_epochs=2, epochs=2),
            dict(lr_text=0.0),
            dict(lr_visual=-1e-7),
            dict(lr_other=0.0),
            dict(sampling="stratified"),
            dict(batch_products=1),
            dict(instances_per_product=0),
        ],
    )
    def test_bad_values_rejected(self, kwargs):
        with pytest.raises(ConfigError):
            train_cfg(**kwargs).validate()

    def test_defaults_valid(self):
        TrainConfig().validate()

    def test_batch_items(self):
        assert TrainConfig(batch_products=28, instances_per_product=3).batch_items == 84


class TestTraining:
    def test_short_run_produces_artifacts(self, corpus, tmp_path):
        result = train(model_cfg(), train_cfg(), corpus, tmp_path)
        assert result.checkpoint_path.exists()
        assert math.isfinite(result.first_loss)
        assert math.isfinite(result.final_loss)
        records = [
            json.loads(line) for line in result.metrics_path.read_text().splitlines()
        ]
        assert len(records) == 4  # epochs * steps_per_epoch
        assert [r["step"] for r in records] == [1, 2, 3, 4]
        assert [r["epoch"] for r in records] == [1, 1, 2, 2]
        for r in records:
            assert set(r) >= {"total", "cross_domain", "classification", "lr_text"}

    def test_metrics_log_reproducible_bit_for_bit(self, corpus, tmp_path):
        a = train(model_cfg(), train_cfg(seed=3), corpus, tmp_path / "a")
        b = train(model_cfg(), train_cfg(seed=3), corpus, tmp_path / "b")
        assert a.metrics_path.read_bytes() == b.metrics_path.read_bytes()

    def test_seed_changes_trajectory(self, corpus, tmp_path):
        a = train(model_cfg(), train_cfg(seed=3), corpus, tmp_path / "a")
        b = train(model_cfg(), train_cfg(seed=4), corpus, tmp_path / "b")
        assert a.final_loss != b.final_loss

    def test_loss_decreases(self, corpus, tmp_path):
        cfg = train_cfg(epochs=6, steps_per_epoch=5, warmup_epochs=1)
        result = train(model_cfg(), cfg, corpus, tmp_path)
        assert result.final_loss < result.first_loss

    def test_random_sampling_runs(self, corpus, tmp_path):
        result = train(model_cfg(), train_cfg(sampling="random"), corpus, tmp_path)
        assert math.isfinite(result.final_loss)

    def test_class_count_follows_corpus(self, corpus, tmp_path):
        result = train(model_cfg(n_classes=99), train_cfg(), corpus, tmp_path)
        assert result.model.cfg.n_classes == len(corpus.products)

    def test_lr_schedule_recorded(self, corpus, tmp_path):
        cfg = train_cfg(epochs=4, warmup_epochs=2, steps_per_epoch=1, lr_other=1.0)
        result = train(model_cfg(), cfg, corpus, tmp_path)
        records = [
            json.loads(line) for line in result.metrics_path.read_text().splitlines()
        ]
        lrs = [r["lr_other"] for r in records]
        assert lrs[0] == pytest.approx(0.5)   # halfway through warmup
        assert lrs[1] == pytest.approx(1.0)   # warmup end
        assert lrs[3] == pytest.approx(0.0, abs=1e-12)
