"""Longer runs; excluded by default, run with `pytest -m slow`."""

import numpy as np
import pytest

from core.config import resolve
from core.data import BlockSource, SyntheticTask, gen_synthetic
from core.experiments import compare_pipelines, geometry_study, mask_ratio_sweep
from core.mask import mask_size
from core.model import MODEL_PRESETS, build_model
from core.trainer import FinetuneConfig, FinetuneMode, PMPMode, StandardMode, TrainConfig, finetune, pretrain

pytestmark = pytest.mark.slow


def test_complement_frozen_over_long_desk_run():
    model = build_model(MODEL_PRESETS["desk"], seed=0)
    source = BlockSource.from_task(SyntheticTask("markov-lm", seed=0, n_train=4096, length=128),
                                   block_len=64, shuffle_buffer=64, seed=0)
    cfg = TrainConfig(base_lr=3e-4, warmup_updates=20, total_updates=500, micro_batch=4, seed=0)
    result = pretrain(model, source, cfg, PMPMode(rho=0.7, t_eb=50))
    frozen = ~result.mask.bits
    assert result.mask.k == mask_size(model.d, 0.7)
    assert np.array_equal(result.checkpoint.params[frozen], result.theta0[frozen])


def test_full_mask_matches_standard_over_many_updates(smoke_config):
    task = SyntheticTask("copy-lm", seed=1, n_train=2048, length=33)
    cfg = TrainConfig(base_lr=1e-3, warmup_updates=10, total_updates=200, micro_batch=4, seed=1)
    standard = pretrain(build_model(smoke_config, seed=1),
                        BlockSource.from_task(task, block_len=32, shuffle_buffer=16, seed=1), cfg, StandardMode())
    masked = pretrain(build_model(smoke_config, seed=1),
                      BlockSource.from_task(task, block_len=32, shuffle_buffer=16, seed=1), cfg,
                      PMPMode(rho=1.0, t_eb=20))
    assert np.array_equal(standard.checkpoint.params, masked.checkpoint.params)


def test_repeated_token_corpus_is_learned(smoke_config):
    source = BlockSource([b"ab" * 2000], block_len=32, shuffle_buffer=0)
    cfg = TrainConfig(base_lr=3e-3, warmup_updates=5, total_updates=60, micro_batch=2, seed=0)
    held = BlockSource([b"ab" * 200], block_len=32).take(4)
    result = pretrain(build_model(smoke_config, seed=0), source, cfg, eval_blocks=held)
    assert result.final_eval_loss < 0.25 * result.initial_eval_loss


def test_full_finetune_learns_keyword_task(smoke_checkpoint):
    data = gen_synthetic(SyntheticTask("keyword-cls", seed=0, n_train=480, n_eval=200, length=32))
    ft = FinetuneConfig(lr=3e-3, epochs=10, micro_batch=16, seed=0)
    assert ft.train_config(480).total_updates == 300
    result = finetune(smoke_checkpoint, data, ft, FinetuneMode.unauthorized_full(), with_baseline=False)
    assert result.post_accuracy > 0.9


# -------------------------
# Desk-scale directional studies
# -------------------------

@pytest.fixture(scope="module")
def desk_run():
    return resolve("desk")


@pytest.fixture(scope="module")
def pipeline_report(desk_run):
    return compare_pipelines(desk_run, seeds=[0, 1, 2], rho=0.7)


def test_nopmp_checkpoint_is_finetunable(pipeline_report):
    assert pipeline_report["mean"]["gain_unauth_nopmp"] > 0.2


def test_pmp_resists_unauthorized_finetuning(pipeline_report):
    checks = pipeline_report["checks"]
    assert checks["pmp_resists_unauthorized"]
    assert checks["capability_preserved"]


def test_authorized_gain_at_least_unauthorized(pipeline_report):
    assert pipeline_report["checks"]["authorized_at_least_unauthorized"]


def test_earlybird_mask_not_above_random(pipeline_report):
    assert pipeline_report["checks"]["earlybird_not_above_random"]


def test_mask_ratio_orders_gain(desk_run):
    report = mask_ratio_sweep(desk_run, seeds=[0, 1, 2], ratios=(0.5, 0.9, 1.0))
    assert report["checks"]["gain_non_decreasing_in_rho"]


def test_landscape_and_gradient_overlap(desk_run):
    checks = geometry_study(desk_run, seeds=[0, 1, 2], rho=0.7)["checks"]
    assert checks["curves_meet_at_origin"]
    assert checks["full_directions_steeper"]
    assert checks["overlap_below_fresh"]
    assert checks["overlap_substantial"]
