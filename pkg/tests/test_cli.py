"""End-to-end tests of the command-line interface."""

import json
from pathlib import Path

import numpy as np
import pytest
import torch

from density_adapt.cli import commands, main
from density_adapt.config import load_config
from density_adapt.data import load_dataset
from density_adapt.networks import Counter, save_checkpoint

from conftest import TINY_OVERRIDES

ZERO_WEIGHTS = ["train.weights.lambda=0.0", "train.weights.beta=0.0", "train.weights.gamma=0.0"]


def with_overrides(overrides):
    args = []
    for item in overrides:
        args += ["--set", item]
    return args


@pytest.fixture
def toy_dir(tmp_path) -> Path:
    """Tiny toy datasets and the config pointing at them."""
    out = tmp_path / "toy"
    assert main(["gen-toy", "--out", str(out), "--n", "12", "--seed", "7", *with_overrides(TINY_OVERRIDES)]) == 0
    return out


def run(command, toy_dir, out, *extra, overrides=()):
    return main([command, "--config", str(toy_dir / "config.yaml"), "--out", str(out), *extra, *with_overrides(overrides)])


@pytest.mark.integration
class TestGenToy:
    def test_writes_four_splits_and_config(self, toy_dir):
        counts = {split: len(list((toy_dir / split / "images").glob("*.png"))) for split in ("source", "source_test", "target", "target_test")}
        assert counts == {"source": 12, "source_test": 10, "target": 12, "target_test": 10}

        config = load_config(toy_dir / "config.yaml")
        assert config.data.source_root == toy_dir / "source"
        assert config.data.eval_root == toy_dir / "target_test"
        assert config.train.seed == 7
        assert config.network.counter.block_channels == [8, 16, 16]

    def test_same_seed_same_files(self, toy_dir, tmp_path):
        again = tmp_path / "again"
        assert main(["gen-toy", "--out", str(again), "--n", "12", "--seed", "7", *with_overrides(TINY_OVERRIDES)]) == 0
        for path in sorted((toy_dir / "source").rglob("*")):
            if path.is_file():
                assert path.read_bytes() == (again / path.relative_to(toy_dir)).read_bytes()

    def test_held_out_names_follow_training_names(self, toy_dir):
        names = [s.name for s in load_dataset(toy_dir / "source_test")]
        assert names[0] == "src_00012"

    def test_rejects_zero_images(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            main(["gen-toy", "--out", str(tmp_path / "x"), "--n", "0"])
        assert exc.value.code == 2

    def test_refuses_non_empty_output(self, toy_dir):
        assert main(["gen-toy", "--out", str(toy_dir), "--n", "12"]) == 2
        assert main(["gen-toy", "--out", str(toy_dir), "--n", "12", "--force", *with_overrides(TINY_OVERRIDES)]) == 0


@pytest.mark.integration
class TestTrainingCommands:
    def test_train_outputs(self, toy_dir, tmp_path, capsys):
        out = tmp_path / "train"
        assert run("train", toy_dir, out) == 0
        assert capsys.readouterr().out.strip().endswith("train")
        for name in ("config.yaml", "metrics.csv", "best.pt", "last.pt", "summary.json", "loss_curves.png", "report.json", "density_grid.png"):
            assert (out / name).exists(), name
        summary = json.loads((out / "summary.json").read_text())
        assert summary["mode"] == "supervised" and summary["steps"] == 6 and summary["seed"] == 7
        assert load_config(out / "config.yaml") == load_config(toy_dir / "config.yaml")

    def test_zero_weight_adapt_matches_train(self, toy_dir, tmp_path):
        assert run("train", toy_dir, tmp_path / "train", overrides=ZERO_WEIGHTS) == 0
        assert run("adapt", toy_dir, tmp_path / "adapt", overrides=ZERO_WEIGHTS) == 0
        plain = json.loads((tmp_path / "train" / "summary.json").read_text())
        adapted = json.loads((tmp_path / "adapt" / "summary.json").read_text())
        assert adapted["best_val_mae"] == plain["best_val_mae"]
        assert adapted["mode"] == "adapt"

    def test_resume_continues_numbering(self, toy_dir, tmp_path):
        assert run("spr-train", toy_dir, tmp_path / "half", overrides=["train.max_steps=3"]) == 0
        assert run("spr-train", toy_dir, tmp_path / "rest", "--resume", str(tmp_path / "half" / "last.pt")) == 0
        summary = json.loads((tmp_path / "rest" / "summary.json").read_text())
        assert summary["steps"] == 6

    def test_config_error_exit_code(self, toy_dir, tmp_path):
        assert run("train", toy_dir, tmp_path / "bad", overrides=["train.patience=0"]) == 2

    def test_data_error_exit_code(self, toy_dir, tmp_path):
        assert run("train", toy_dir, tmp_path / "bad", overrides=[f"data.source_root={tmp_path / 'missing'}"]) == 3

    def test_numerical_error_exit_code(self, mocker, toy_dir, tmp_path):
        mocker.patch(
            "density_adapt.services.training.loss_count",
            side_effect=lambda pred, gt: pred.sum() * float("nan"),
        )
        assert run("train", toy_dir, tmp_path / "nan") == 4
        assert (tmp_path / "nan" / "nan_snapshot.pt").exists()


@pytest.mark.integration
class TestEvaluationCommands:
    def test_zero_counter_report(self, toy_dir, tmp_path):
        config = load_config(toy_dir / "config.yaml")
        counter = Counter(config.network.counter)
        with torch.no_grad():
            counter.head.weight.zero_()
            counter.head.bias.fill_(-1.0)
        checkpoint = save_checkpoint(tmp_path / "zero.pt", {"G": counter}, config.network, 0)

        out = tmp_path / "eval"
        assert run("evaluate", toy_dir, out, "--counter", str(checkpoint), "--per-sample-csv") == 0

        report = json.loads((out / "report.json").read_text())
        counts = [s.annotation.count for s in load_dataset(toy_dir / "target_test")]
        assert report["mae"] == pytest.approx(np.mean(counts))
        assert report["n_samples"] == 10
        assert (out / "per_sample.csv").exists()

    def test_refine_train_uses_source_counter_for_training_maps(self, mocker, toy_dir, tmp_path):
        config = load_config(toy_dir / "config.yaml")
        adapted = save_checkpoint(tmp_path / "adapted.pt", {"G": Counter(config.network.counter)}, config.network, 0)
        torch.manual_seed(1)
        source_only = save_checkpoint(tmp_path / "source.pt", {"G": Counter(config.network.counter)}, config.network, 0)
        load = mocker.spy(commands, "load_counter")
        pipeline = mocker.spy(commands, "refiner_pipeline")

        out = tmp_path / "refine-train"
        assert run("refine-train", toy_dir, out, "--counter", str(adapted), "--source-counter", str(source_only)) == 0

        assert [call.args[0] for call in load.call_args_list] == [adapted, source_only]
        assert pipeline.call_args.args[2] is load.spy_return
        assert (out / "refiner.pt").exists()

    def test_refine_train_defaults_source_counter(self, mocker, toy_dir, tmp_path):
        config = load_config(toy_dir / "config.yaml")
        checkpoint = save_checkpoint(tmp_path / "g.pt", {"G": Counter(config.network.counter)}, config.network, 0)
        load = mocker.spy(commands, "load_counter")
        pipeline = mocker.spy(commands, "refiner_pipeline")
        assert run("refine-train", toy_dir, tmp_path / "out", "--counter", str(checkpoint)) == 0
        assert load.call_count == 1
        assert pipeline.call_args.args[2] is load.spy_return

    def test_missing_checkpoint_is_data_error(self, toy_dir, tmp_path):
        assert run("evaluate", toy_dir, tmp_path / "eval", "--counter", str(tmp_path / "none.pt")) == 3

    @pytest.mark.slow
    def test_full_recipe(self, toy_dir, tmp_path):
        assert run("train", toy_dir, tmp_path / "train") == 0
        assert run("adapt", toy_dir, tmp_path / "adapt") == 0
        counter = tmp_path / "adapt" / "best.pt"

        assert run("refine-train", toy_dir, tmp_path / "refine-train", "--counter", str(counter)) == 0
        refinement = json.loads((tmp_path / "refine-train" / "refinement.json").read_text())
        assert sorted(refinement["split"]) == ["test", "train", "val"]
        with np.load(tmp_path / "refine-train" / "refined_maps.npz") as maps:
            assert len(maps.files) == 12
            assert maps["tgt_00000"].shape == (64, 64)

        refiner = tmp_path / "refine-train" / "refiner.pt"
        assert run("refine", toy_dir, tmp_path / "refine", "--counter", str(counter), "--refiner", str(refiner)) == 0
        assert run("evaluate", toy_dir, tmp_path / "evaluate", "--counter", str(counter)) == 0

        refined = json.loads((tmp_path / "refine" / "report.json").read_text())
        plain = json.loads((tmp_path / "evaluate" / "report.json").read_text())
        assert refined["n_samples"] == plain["n_samples"] == 10
        assert (tmp_path / "refine" / "refined_maps.npz").exists()
