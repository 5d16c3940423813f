"""Trainer behavior: determinism, accumulation, logging, abort, validation."""

import copy
import csv
import math

import numpy as np
import pytest
import torch

from crowdmap.dataset import split
from crowdmap.errors import TrainingDivergedError
from crowdmap.losses import LossConfig
from crowdmap.model import ModelConfig, ModelOutput, build, initialize, load_checkpoint
from crowdmap.patches import aerial_profile, generate_patches
from crowdmap.training import TrainConfig, collate, train, validate

TINY = ModelConfig(encoder_channels=(2, 2, 2, 2, 2), decoder_channels=(2, 2, 2, 2, 2),
                   use_pretrained_encoder=False)


@pytest.fixture(scope="module")
def patch_pool(corpus):
    _, manifest = corpus
    profile = aerial_profile(tile_size=128, crop_size=64, crops_per_unit=1,
                             augmentations=(), rng_seed=0)
    return list(generate_patches(split(manifest, "train"), profile))


def tiny_model(seed=0):
    return initialize(build(TINY), seed=seed)


class TestTrainConfig:
    def test_defaults_follow_published_recipe(self):
        cfg = TrainConfig()
        assert cfg.learning_rate == 3e-6
        assert cfg.batch_size == 60
        assert cfg.adam_betas == (0.9, 0.999)

    @pytest.mark.parametrize("kwargs", [
        {"learning_rate": 0.0},
        {"learning_rate": -1e-6},
        {"batch_size": 0},
        {"max_steps": 0},
        {"accumulation_steps": 0},
        {"batch_size": 10, "accumulation_steps": 3},
    ])
    def test_rejects_bad_values(self, kwargs):
        with pytest.raises(ValueError):
            TrainConfig(**kwargs)


class TestCollate:
    def test_stacks_batch_tensors(self, patch_pool):
        x, low, high = collate(patch_pool[:3])
        assert x.shape == (3, 3, 64, 64)
        assert low.shape == (3, 1, 16, 16)
        assert high.shape == (3, 1, 64, 64)
        assert x.dtype == torch.float32

    def test_preserves_values_channel_first(self, patch_pool):
        sample = patch_pool[0]
        x, low, high = collate([sample])
        np.testing.assert_array_equal(x[0, 2].numpy(), sample.image_crop[:, :, 2])
        np.testing.assert_array_equal(low[0, 0].numpy(), sample.gt_low.values)
        np.testing.assert_array_equal(high[0, 0].numpy(), sample.gt_full.values)

    def test_rejects_mixed_sizes(self, corpus):
        _, manifest = corpus
        records = split(manifest, "train")
        small = aerial_profile(tile_size=128, crop_size=64, crops_per_unit=1,
                               augmentations=(), rng_seed=0)
        big = aerial_profile(tile_size=128, crop_size=96, crops_per_unit=1,
                             augmentations=(), rng_seed=0)
        mixed = [next(iter(generate_patches(records[:1], small))),
                 next(iter(generate_patches(records[:1], big)))]
        with pytest.raises(ValueError, match="mixed"):
            collate(mixed)


class TestDeterminism:
    def test_same_seed_reproduces_early_losses_exactly(self, patch_pool):
        cfg = TrainConfig(learning_rate=1e-4, batch_size=4, max_steps=2, seed=3)
        log_a = train(tiny_model(), patch_pool, cfg).log
        log_b = train(tiny_model(), patch_pool, cfg).log
        assert [(r.total, r.loss_low, r.loss_high) for r in log_a] == \
               [(r.total, r.loss_low, r.loss_high) for r in log_b]

    def test_different_seed_changes_batch_order(self, patch_pool):
        base = dict(learning_rate=1e-4, batch_size=4, max_steps=2)
        log_a = train(tiny_model(), patch_pool, TrainConfig(seed=0, **base)).log
        log_b = train(tiny_model(), patch_pool, TrainConfig(seed=1, **base)).log
        assert [r.total for r in log_a] != [r.total for r in log_b]


class TestGradientAccumulation:
    def test_accumulated_step_matches_direct_batch(self, patch_pool):
        direct = tiny_model(seed=2)
        sliced = copy.deepcopy(direct)
        base = dict(learning_rate=1e-4, batch_size=4, max_steps=1, seed=5)
        train(direct, patch_pool, TrainConfig(accumulation_steps=1, **base))
        train(sliced, patch_pool, TrainConfig(accumulation_steps=2, **base))
        for (name, p_direct), (_, p_sliced) in zip(direct.named_parameters(),
                                                   sliced.named_parameters()):
            torch.testing.assert_close(p_direct, p_sliced, rtol=1e-6, atol=1e-8,
                                       msg=f"parameter {name} diverged")

    def test_logged_losses_match_direct_batch(self, patch_pool):
        base = dict(learning_rate=1e-4, batch_size=4, max_steps=1, seed=5)
        row_direct = train(tiny_model(seed=2), patch_pool,
                           TrainConfig(accumulation_steps=1, **base)).log[0]
        row_sliced = train(tiny_model(seed=2), patch_pool,
                           TrainConfig(accumulation_steps=2, **base)).log[0]
        assert row_direct.total == pytest.approx(row_sliced.total, rel=1e-6)
        assert row_direct.loss_low == pytest.approx(row_sliced.loss_low, rel=1e-6)


class TestDivergenceAbort:
    def test_nonfinite_loss_raises_with_batch_indices(self, patch_pool):
        model = tiny_model()
        with torch.no_grad():
            next(model.parameters()).fill_(float("nan"))
        cfg = TrainConfig(learning_rate=1e-4, batch_size=4, max_steps=3, seed=0)
        with pytest.raises(TrainingDivergedError) as exc:
            train(model, patch_pool, cfg)
        assert exc.value.step == 0
        assert len(exc.value.sample_indices) == 4
        assert all(0 <= i < len(patch_pool) for i in exc.value.sample_indices)

    def test_empty_sample_list_rejected(self):
        with pytest.raises(ValueError, match="non-empty"):
            train(tiny_model(), [], TrainConfig(max_steps=1))


class TestRunArtifacts:
    def test_csv_log_matches_memory_log(self, patch_pool, tmp_path):
        cfg = TrainConfig(learning_rate=1e-4, batch_size=4, max_steps=3, seed=1)
        result = train(tiny_model(), patch_pool, cfg, out_dir=tmp_path)
        assert result.log_path == tmp_path / "training_log.csv"
        with open(result.log_path) as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["step", "total", "loss_low", "loss_high"]
        assert len(rows) == 1 + 3
        for row, mem in zip(rows[1:], result.log):
            assert int(row[0]) == mem.step
            assert float(row[1]) == pytest.approx(mem.total, rel=1e-6)

    def test_second_run_appends_without_new_header(self, patch_pool, tmp_path):
        cfg = TrainConfig(learning_rate=1e-4, batch_size=4, max_steps=2, seed=1)
        train(tiny_model(), patch_pool, cfg, out_dir=tmp_path)
        train(tiny_model(), patch_pool, cfg, out_dir=tmp_path)
        with open(tmp_path / "training_log.csv") as fh:
            rows = list(csv.reader(fh))
        assert len(rows) == 1 + 4
        assert sum(row[0] == "step" for row in rows) == 1

    def test_checkpoint_cadence_and_final(self, patch_pool, tmp_path):
        cfg = TrainConfig(learning_rate=1e-4, batch_size=4, max_steps=4, seed=1,
                          checkpoint_every=2)
        model = tiny_model()
        result = train(model, patch_pool, cfg, out_dir=tmp_path)
        assert (tmp_path / "step_000002.ckpt").exists()
        assert (tmp_path / "step_000004.ckpt").exists()
        assert result.final_checkpoint == tmp_path / "final.ckpt"
        restored, extra = load_checkpoint(result.final_checkpoint)
        assert extra == {"step": 4, "finished": True}
        for (name, p), (_, q) in zip(model.named_parameters(), restored.named_parameters()):
            torch.testing.assert_close(p, q, rtol=0, atol=0, msg=name)

    def test_no_out_dir_means_no_files(self, patch_pool):
        cfg = TrainConfig(learning_rate=1e-4, batch_size=4, max_steps=1, seed=1)
        result = train(tiny_model(), patch_pool, cfg)
        assert result.final_checkpoint is None
        assert result.log_path is None

    def test_zero_lambda_makes_total_equal_low_loss(self, patch_pool):
        cfg = TrainConfig(learning_rate=1e-4, batch_size=4, max_steps=2, seed=1)
        result = train(tiny_model(), patch_pool, cfg,
                       loss_config=LossConfig(lambda_weight=0.0))
        for row in result.log:
            assert row.total == row.loss_low


class TestLossDecreases:
    def test_short_run_reduces_training_loss(self, patch_pool):
        cfg = TrainConfig(learning_rate=1e-3, batch_size=6, max_steps=60, seed=0)
        result = train(tiny_model(), patch_pool, cfg)
        first = np.mean([r.total for r in result.log[:10]])
        last = np.mean([r.total for r in result.log[-10:]])
        assert last < first


class TestValidate:
    def test_perfect_predictor_scores_zero(self, corpus):
        _, manifest = corpus
        records = split(manifest, "train")
        from crowdmap.dataset import load_annotations
        counts = iter([float(load_annotations(r).count) for r in records])

        def exact_stub(model, image):
            low = np.full((16, 16), next(counts) / 256.0, dtype=np.float32)
            return ModelOutput(density_low=low, density_high=np.zeros((64, 64), np.float32))

        report = validate(None, records, predict_fn=exact_stub)
        assert report.mae == 0.0
        assert report.mnae == 0.0
        assert report.rmse == 0.0

    def test_zero_predictor_on_known_counts(self, known_counts_corpus):
        records, counts = known_counts_corpus
        assert counts == [10, 20]

        def zero_stub(model, image):
            return ModelOutput(density_low=np.zeros((16, 16), np.float32),
                               density_high=np.zeros((64, 64), np.float32))

        report = validate(None, records, predict_fn=zero_stub)
        assert report.mae == pytest.approx(15.0)
        assert report.rmse == pytest.approx(math.sqrt((100.0 + 400.0) / 2.0))
        assert report.mnae == pytest.approx(1.0)

    def test_single_image_rmse_equals_mae(self, known_counts_corpus):
        records, _ = known_counts_corpus

        def stub(model, image):
            return ModelOutput(density_low=np.full((16, 16), 13.25 / 256.0, np.float32),
                               density_high=np.zeros((64, 64), np.float32))

        report = validate(None, records[:1], predict_fn=stub)
        assert report.rmse == pytest.approx(report.mae)

    def test_empty_records_rejected(self):
        with pytest.raises(ValueError, match="at least one"):
            validate(None, [])


@pytest.fixture(scope="module")
def known_counts_corpus(tmp_path_factory):
    """Two 64px images whose annotation counts are exactly 10 and 20."""
    from crowdmap.fixture import FixtureSpec, generate_fixture

    root = tmp_path_factory.mktemp("known_counts")
    a = generate_fixture(root / "a", FixtureSpec(n_images=1, image_size=64,
                                                 min_points=10, max_points=10,
                                                 train_fraction=1.0, seed=1))
    b = generate_fixture(root / "b", FixtureSpec(n_images=1, image_size=64,
                                                 min_points=20, max_points=20,
                                                 train_fraction=1.0, seed=2))
    records = split(a, "train") + split(b, "train")
    from crowdmap.dataset import load_annotations
    return records, [load_annotations(r).count for r in records]
