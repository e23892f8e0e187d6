"""Desk-scale directional reproductions on the toy domains.

Each test trains several counters for thousands of steps; run with
``pytest -m slow``.
"""

from pathlib import Path

import numpy as np
import pytest

from density_adapt.config import GapConfig, load_config
from density_adapt.data import gen_toy_domains
from density_adapt.services import (
    adapt_train,
    coarse_maps,
    evaluate,
    refiner_pipeline,
    spr_supervised_train,
    supervised_train,
)

TOY_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "toy.yaml"
SEEDS = (0, 1, 2)
N_TRAIN, N_TEST = 200, 50


def toy_config(seed: int, overrides=()):
    return load_config(TOY_CONFIG, [f"train.seed={seed}", *overrides])


def toy_data(seed: int, gap: GapConfig):
    config = toy_config(seed)
    toy = config.data.toy
    source, target = gen_toy_domains(seed, N_TRAIN, toy.size, gap, toy)
    source_test, target_test = gen_toy_domains(seed, N_TEST, toy.size, gap, toy, start=N_TRAIN)
    return source, target, source_test, target_test


@pytest.mark.slow
class TestDeskScale:
    def test_adaptation_lowers_target_error(self):
        baseline, adapted = [], []
        for seed in SEEDS:
            source, target, _, target_test = toy_data(seed, GapConfig.standard())
            config = toy_config(seed)
            baseline.append(evaluate(supervised_train(source, config).counter, target_test).mae)
            adapted.append(evaluate(adapt_train(source, target, config).counter, target_test).mae)
        assert np.mean(adapted) <= 0.9 * np.mean(baseline)

    def test_output_alignment_does_not_hurt(self):
        features_only, full = [], []
        for seed in SEEDS:
            source, target, _, target_test = toy_data(seed, GapConfig.standard())
            config = toy_config(seed, ["train.weights.beta=0.0", "train.weights.gamma=0.0"])
            features_only.append(evaluate(adapt_train(source, target, config).counter, target_test).mae)
            full.append(evaluate(adapt_train(source, target, toy_config(seed)).counter, target_test).mae)
        assert np.mean(full) <= np.mean(features_only)

    def test_pyramid_term_in_supervision(self):
        plain, pyramid = [], []
        for seed in SEEDS:
            source, _, source_test, _ = toy_data(seed, GapConfig.zero())
            config = toy_config(seed)
            plain.append(evaluate(supervised_train(source, config).counter, source_test).mae)
            pyramid.append(evaluate(spr_supervised_train(source, config).counter, source_test).mae)
        assert np.mean(pyramid) <= np.mean(plain)

    def test_refiner_does_not_lower_psnr(self):
        coarse_psnr, refined_psnr = [], []
        for seed in SEEDS:
            source, target, source_test, _ = toy_data(seed, GapConfig.standard())
            config = toy_config(seed)
            counter = supervised_train(source, config).counter
            result = refiner_pipeline(source, source_test, counter, coarse_maps(counter, target[:4]), config)
            coarse_psnr.append(result.test_psnr_coarse)
            refined_psnr.append(result.test_psnr_refined)
        assert np.mean(refined_psnr) >= np.mean(coarse_psnr)

    def test_zero_gap_domains_score_alike(self):
        source, _, source_test, target_test = toy_data(0, GapConfig.zero())
        counter = supervised_train(source, toy_config(0)).counter
        source_mae = evaluate(counter, source_test).mae
        target_mae = evaluate(counter, target_test).mae
        assert 0.5 <= target_mae / source_mae <= 2.0

    def test_standard_gap_hurts_source_counter(self):
        source, _, source_test, target_test = toy_data(0, GapConfig.standard())
        counter = supervised_train(source, toy_config(0)).counter
        assert evaluate(counter, target_test).mae > evaluate(counter, source_test).mae
