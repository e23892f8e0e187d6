"""Tests for counter training in its three modes."""

import csv
from dataclasses import replace

import pytest
import torch

from density_adapt.data import PointAnnotation, SamplePair
from density_adapt.errors import CheckpointError, DataError, NumericalError
from density_adapt.losses import loss_spr
from density_adapt.networks import read_checkpoint
from density_adapt.services import CounterTrainer, adapt_train, spr_supervised_train, supervised_train
from density_adapt.services.training import METRIC_COLUMNS, BatchSampler, OscillationMonitor

from conftest import tiny_config_from

ZERO_WEIGHTS = ["train.weights.lambda=0.0", "train.weights.beta=0.0", "train.weights.gamma=0.0"]


def batch(samples, trainer, labeled=True):
    dataset = trainer._as_dataset(samples, labeled=labeled)
    images = torch.stack(dataset.images)
    if not labeled:
        return images
    return images, torch.stack(dataset.densities)


def parameters(module):
    return [p.detach().clone() for p in module.parameters()]


def same(a, b):
    return all(torch.equal(x, y) for x, y in zip(a, b))


@pytest.mark.unit
class TestBatchSampler:
    def test_epochs_cover_every_index(self):
        sampler = BatchSampler(6, 3, torch.Generator().manual_seed(0))
        epoch = sampler.next_indices() + sampler.next_indices()
        assert sorted(epoch) == list(range(6))

    def test_batch_larger_than_set_wraps(self):
        sampler = BatchSampler(3, 5, torch.Generator().manual_seed(0))
        indices = sampler.next_indices()
        assert len(indices) == 5
        assert sorted(indices[:3]) == [0, 1, 2]

    def test_state_round_trip(self):
        sampler = BatchSampler(7, 3, torch.Generator().manual_seed(1))
        sampler.next_indices()
        state = sampler.state_dict()
        expected = [sampler.next_indices() for _ in range(4)]

        fresh = BatchSampler(7, 3, torch.Generator().manual_seed(99))
        fresh.load_state_dict(state)
        assert [fresh.next_indices() for _ in range(4)] == expected


@pytest.mark.unit
class TestOscillationMonitor:
    def test_steady_losses_pass(self):
        monitor = OscillationMonitor(window=4, threshold=0.5)
        assert not any(monitor.update(1.0 + 0.01 * i, i) for i in range(10))

    def test_oscillation_flags_and_resets(self):
        monitor = OscillationMonitor(window=4, threshold=0.5)
        flags = [monitor.update(v, i) for i, v in enumerate([0.1, 5.0, 0.1, 5.0])]
        assert flags == [False, False, False, True]
        assert len(monitor.values) == 0

    def test_zero_mean_flags(self):
        monitor = OscillationMonitor(window=2, threshold=0.5)
        monitor.update(0.0, 0)
        assert monitor.update(0.0, 1)


@pytest.mark.unit
class TestUpdates:
    def test_discriminator_update_leaves_counter_alone(self, tiny_config, source_samples, target_samples):
        trainer = CounterTrainer(tiny_config, "adapt")
        src, _ = batch(source_samples[:2], trainer)
        tgt = batch(target_samples[:2], trainer, labeled=False)
        before_g = parameters(trainer.counter)
        before_d = parameters(trainer.map_discriminator)

        losses = trainer.discriminator_update(src, tgt)

        assert set(losses) == {"loss_d_feature", "loss_d_map"}
        assert same(before_g, parameters(trainer.counter))
        assert all(p.grad is None for p in trainer.counter.parameters())
        assert not same(before_d, parameters(trainer.map_discriminator))

    def test_counter_update_leaves_discriminators_alone(self, tiny_config, source_samples, target_samples):
        trainer = CounterTrainer(tiny_config, "adapt")
        src, dens = batch(source_samples[:2], trainer)
        tgt = batch(target_samples[:2], trainer, labeled=False)
        before_g = parameters(trainer.counter)
        before_d = parameters(trainer.feature_discriminators) + parameters(trainer.map_discriminator)

        losses = trainer.counter_update(src, dens, tgt)

        assert losses["loss_feature_adv"] > 0 and losses["loss_map_adv"] > 0 and losses["loss_spr"] >= 0
        assert not same(before_g, parameters(trainer.counter))
        assert same(before_d, parameters(trainer.feature_discriminators) + parameters(trainer.map_discriminator))
        assert all(p.requires_grad for p in trainer.map_discriminator.parameters())

    def test_discriminator_step_descends_on_average(self, source_samples, target_samples):
        deltas = []
        for seed in range(20):
            config = tiny_config_from([f"train.seed={seed}", "train.lr_d=0.0001"])
            trainer = CounterTrainer(config, "adapt")
            src, _ = batch(source_samples[:2], trainer)
            tgt = batch(target_samples[:2], trainer, labeled=False)
            first = trainer.discriminator_update(src, tgt)
            second = trainer.discriminator_update(src, tgt)
            deltas.append(
                (second["loss_d_feature"] + second["loss_d_map"]) - (first["loss_d_feature"] + first["loss_d_map"])
            )
        assert sum(deltas) / len(deltas) < 0

    def test_pyramid_scales_stay_inside_bands(self, mocker, tiny_config, target_samples):
        trainer = CounterTrainer(tiny_config, "adapt")
        spr = mocker.patch("density_adapt.services.training.loss_spr", wraps=loss_spr)
        images = batch(target_samples[:1], trainer, labeled=False)
        a_1x = trainer.counter(images).density
        for _ in range(50):
            assert float(trainer._pyramid_loss(images, a_1x)) >= 0
        assert spr.call_count == 50
        for call in spr.call_args_list:
            scales = call.args[3]
            assert 0.8 < scales.m < 1.0 < scales.n < 1.2

    def test_next_pair_batches(self, tiny_config, source_samples, target_samples):
        trainer = CounterTrainer(tiny_config, "adapt")
        pair = trainer.next_pair(
            trainer._as_dataset(source_samples, labeled=True), trainer._as_dataset(target_samples, labeled=False)
        )
        assert isinstance(pair, SamplePair)
        assert pair.source_images.shape == (2, 1, 64, 64)
        assert pair.source_densities.shape[0] == 2
        assert pair.target_images.shape == (2, 1, 64, 64)

        supervised = CounterTrainer(tiny_config, "supervised")
        assert supervised.next_pair(supervised._as_dataset(source_samples, labeled=True)).target_images is None

    def test_default_taps_get_named_discriminators(self, tiny_config):
        trainer = CounterTrainer(tiny_config, "adapt")
        assert set(trainer._modules()) == {"G", "D1", "D2", "D3"}
        assert set(CounterTrainer(tiny_config, "supervised")._modules()) == {"G"}


@pytest.mark.integration
class TestFit:
    def test_zero_weight_adaptation_matches_supervised(self, source_samples, target_samples):
        config = tiny_config_from(ZERO_WEIGHTS)
        plain = supervised_train(source_samples, config)
        adapted = adapt_train(source_samples, target_samples, config)
        assert adapted.best_val_mae == plain.best_val_mae
        assert same(parameters(adapted.counter), parameters(plain.counter))

    def test_zero_gamma_pyramid_matches_supervised(self, source_samples):
        config = tiny_config_from(["train.weights.gamma=0.0"])
        assert spr_supervised_train(source_samples, config).best_val_mae == supervised_train(source_samples, config).best_val_mae

    def test_pyramid_term_logged_and_non_negative(self, source_samples):
        state = spr_supervised_train(source_samples, tiny_config_from(["train.weights.gamma=1.0"]))
        spr = [row["loss_spr"] for row in state.history]
        assert all(v >= 0 for v in spr)
        assert any(v > 0 for v in spr)

    def test_same_seed_same_result(self, source_samples):
        config = tiny_config_from(["train.seed=5"])
        assert supervised_train(source_samples, config).best_val_mae == supervised_train(source_samples, config).best_val_mae

    def test_empty_inputs(self, tiny_config, source_samples):
        with pytest.raises(DataError):
            supervised_train([], tiny_config)
        with pytest.raises(DataError):
            adapt_train(source_samples, [], tiny_config)
        with pytest.raises(DataError):
            CounterTrainer(tiny_config, "adapt").fit(source_samples)

    def test_metrics_csv_and_checkpoints(self, tiny_config, tmp_path, source_samples, target_samples):
        out = tmp_path / "run"
        state = adapt_train(source_samples, target_samples, tiny_config, out_dir=out)

        with open(out / "metrics.csv", newline="") as handle:
            reader = csv.DictReader(handle)
            rows = list(reader)
        assert reader.fieldnames == METRIC_COLUMNS
        assert [int(r["step"]) for r in rows] == list(range(1, 7))
        assert rows[2]["val_mae"] != "" and rows[0]["val_mae"] == ""
        assert float(rows[0]["lr_d"]) == pytest.approx(0.001)

        manifest, tensors, extra = read_checkpoint(out / "best.pt", tiny_config.network)
        assert manifest["step"] == state.best_step
        assert set(tensors) == {"G", "D1", "D2", "D3"}
        assert read_checkpoint(out / "last.pt")[0]["step"] == 6

    def test_early_stopping_restores_best(self, mocker, source_samples):
        config = tiny_config_from(["train.eval_every=1", "train.patience=2", "train.max_steps=20"])
        trainer = CounterTrainer(config, "supervised")
        results = iter([0.5, 0.3, 0.4, 0.6, 0.2])
        snapshots = []

        def fake_validate(val_set):
            snapshots.append(parameters(trainer.counter))
            loss = next(results)
            return {"val_loss": loss, "val_mae": loss * 10, "val_mse": loss * 20}

        mocker.patch.object(trainer, "validate", side_effect=fake_validate)
        state = trainer.fit(source_samples)

        assert state.stopped_early
        assert state.step == 4
        assert state.best_step == 2
        assert state.best_val_mae == pytest.approx(3.0)
        assert same(parameters(state.counter), snapshots[1])

    def test_nan_loss_aborts_with_snapshot(self, mocker, tiny_config, tmp_path, source_samples):
        mocker.patch(
            "density_adapt.services.training.loss_count",
            side_effect=lambda pred, gt: pred.sum() * float("nan"),
        )
        with pytest.raises(NumericalError) as exc:
            supervised_train(source_samples, tiny_config, out_dir=tmp_path / "run")
        assert exc.value.step == 1
        assert exc.value.snapshot == tmp_path / "run" / "nan_snapshot.pt"
        assert exc.value.snapshot.exists()

    def test_resume_is_bit_exact(self, tmp_path, source_samples, target_samples):
        straight = tiny_config_from(["train.eval_every=100"])
        first_half = tiny_config_from(["train.eval_every=100", "train.max_steps=3"])

        adapt_train(source_samples, target_samples, straight, out_dir=tmp_path / "straight")
        adapt_train(source_samples, target_samples, first_half, out_dir=tmp_path / "half")
        adapt_train(
            source_samples,
            target_samples,
            straight,
            out_dir=tmp_path / "resumed",
            resume_from=tmp_path / "half" / "last.pt",
        )

        _, expected, _ = read_checkpoint(tmp_path / "straight" / "last.pt")
        _, resumed, _ = read_checkpoint(tmp_path / "resumed" / "last.pt")
        for name in ("G", "D1", "D2", "D3"):
            for key, tensor in expected[name].items():
                assert torch.equal(tensor, resumed[name][key]), f"{name}.{key}"

    def test_resume_rejects_other_mode(self, tiny_config, tmp_path, source_samples):
        supervised_train(source_samples, tiny_config, out_dir=tmp_path / "run")
        with pytest.raises(CheckpointError):
            spr_supervised_train(source_samples, tiny_config, resume_from=tmp_path / "run" / "last.pt")


@pytest.mark.slow
class TestConvergence:
    def test_overfits_single_sample(self, source_samples):
        config = tiny_config_from(
            ["train.max_steps=300", "train.eval_every=10", "train.patience=100", "train.batch_size=1"]
        )
        state = supervised_train(source_samples[:1], config)
        val_losses = [row["val_loss"] for row in state.history if row["val_loss"] != ""]
        assert state.best_val_loss < 0.5 * val_losses[0]

    def test_learns_empty_scenes(self, source_samples):
        empty = [replace(s, annotation=PointAnnotation()) for s in source_samples[:4]]
        config = tiny_config_from(["train.max_steps=200", "train.eval_every=10", "train.patience=100"])
        state = supervised_train(empty, config)
        maes = [row["val_mae"] for row in state.history if row["val_mae"] != ""]
        assert state.best_val_mae <= maes[0]
        assert state.best_val_mae < 0.5
