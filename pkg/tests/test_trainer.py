import math
from dataclasses import replace

import numpy as np
import pytest

from core.data import BlockSource
from core.errors import ArgumentError, CompatibilityError, ConfigError, NumericError, TrainingError
from core.formats import read_mask, read_metrics, write_mask
from core.mask import BinaryMask, mask_size
from core.model import build_model
from core.quantgeom import adamw_first_step
from core.trainer import (FinetuneConfig, FinetuneMode, MetricsLog, OptimizerState, PMPMode, StandardMode,
                          TrainConfig, clip_by_global_norm, discover_mask, finetune, lr_at, pretrain, step)


# -------------------------
# Schedule and optimizer
# -------------------------

def test_lr_schedule_points():
    cfg = TrainConfig(base_lr=1.0, warmup_updates=10, total_updates=100)
    assert lr_at(0, cfg) == pytest.approx(0.1)
    assert lr_at(9, cfg) == pytest.approx(1.0)
    assert abs(lr_at(10, cfg) - 1.0) < 1e-9
    assert abs(lr_at(99, cfg) - cfg.min_lr) < 1e-12
    mid = lr_at(10 + 89 // 2, cfg)
    assert cfg.min_lr < mid < 1.0
    with pytest.raises(ArgumentError):
        lr_at(100, cfg)


def test_lr_without_warmup():
    cfg = TrainConfig(base_lr=2.0, warmup_updates=0, total_updates=5)
    assert lr_at(0, cfg) == pytest.approx(2.0)


@pytest.mark.parametrize("kwargs", [
    dict(total_updates=0),
    dict(warmup_updates=300, total_updates=200),
    dict(base_lr=0.0),
    dict(betas=(1.0, 0.999)),
])
def test_invalid_train_configs(kwargs):
    with pytest.raises(ConfigError):
        TrainConfig(**kwargs).validate()


def test_adamw_first_step_matches_closed_form():
    cfg = TrainConfig(base_lr=0.1, weight_decay=0.0, clip_norm=0.0)
    state = OptimizerState.zeros(1)
    new = step(np.array([0.0]), np.array([1.0]), state, cfg)
    assert new[0] == pytest.approx(adamw_first_step(0.0, 1.0, 0.1, (0.9, 0.999), 1e-8, 0.0), abs=1e-15)
    assert new[0] == pytest.approx(-0.0999999990, abs=1e-9)
    assert state.step_count == 1


def test_all_ones_mask_matches_unmasked(rng):
    cfg = TrainConfig(base_lr=0.01)
    params = rng.normal(size=50).astype(np.float32)
    plain, masked = params.copy(), params.copy()
    s1, s2 = OptimizerState.zeros(50), OptimizerState.zeros(50)
    ones = BinaryMask.full(50)
    for _ in range(5):
        g = rng.normal(size=50)
        plain = step(plain, g, s1, cfg)
        masked = step(masked, g, s2, cfg, ones)
    assert np.array_equal(plain, masked)
    assert np.array_equal(s1.m, s2.m) and np.array_equal(s1.v, s2.v)


def test_frozen_coordinates_stay_bit_identical(rng):
    cfg = TrainConfig(base_lr=0.05, weight_decay=0.1)
    params0 = rng.normal(size=40).astype(np.float32)
    bits = rng.random(40) < 0.7
    state = OptimizerState.zeros(40)
    params = params0.copy()
    for _ in range(100):
        params = step(params, rng.normal(size=40) * 10, state, cfg, bits)
    assert np.array_equal(params[~bits], params0[~bits])
    assert np.all(state.m[~bits] == 0.0) and np.all(state.v[~bits] == 0.0)
    assert not np.array_equal(params[bits], params0[bits])


def test_clip_by_global_norm():
    clipped, norm = clip_by_global_norm(np.array([3.0, 4.0]), 1.0)
    assert norm == 5.0
    assert np.linalg.norm(clipped) == pytest.approx(1.0, abs=1e-6)
    same, _ = clip_by_global_norm(np.array([3.0, 4.0]), 0.0)
    assert same.tolist() == [3.0, 4.0]


def test_non_finite_gradient_aborts_step():
    state = OptimizerState.zeros(2)
    with pytest.raises(NumericError):
        step(np.zeros(2), np.array([0.0, np.nan]), state, TrainConfig())
    assert state.step_count == 0


# -------------------------
# Metrics
# -------------------------

@pytest.mark.parametrize("background", [False, True])
def test_metrics_log_writes_json_lines(tmp_path, background):
    path = tmp_path / "m.jsonl"
    with MetricsLog(path, background=background) as log:
        log.record(phase="train", step=0, loss=1.5, iou=None)
        log.record(phase="train", step=1, loss=1.25)
    assert read_metrics(path) == [{"phase": "train", "step": 0, "loss": 1.5},
                                  {"phase": "train", "step": 1, "loss": 1.25}]


# -------------------------
# Pre-training
# -------------------------

def test_pmp_keeps_complement_at_initialization(smoke_config, lm_source, quick_train):
    model = build_model(smoke_config, seed=0)
    mode = PMPMode(rho=0.7, t_eb=4, required_streak=2)
    result = pretrain(model, lm_source, quick_train, mode)
    frozen = ~result.mask.bits
    assert result.mask.k == mask_size(model.d, 0.7)
    assert np.array_equal(result.checkpoint.params[frozen], result.theta0[frozen])
    assert not np.array_equal(result.checkpoint.params[~frozen], result.theta0[~frozen])
    warmup = [r for r in result.metrics.records if r["phase"] == "warmup"]
    assert 1 <= len(warmup) <= 4
    assert all("iou" in r for r in warmup[1:])
    assert len([r for r in result.metrics.records if r["phase"] == "train"]) == quick_train.total_updates


def test_pmp_mask_file_keeps_requested_rho(smoke_config, lm_source, quick_train, tmp_path):
    result = pretrain(build_model(smoke_config, seed=0), lm_source, quick_train,
                      PMPMode(rho=0.7, t_eb=4, required_streak=2))
    path = tmp_path / "pmp.mask"
    write_mask(path, result.mask)
    stored = read_mask(path)
    assert stored.rho == 0.7
    assert stored.k == mask_size(stored.d, stored.rho)
    assert stored == result.mask


def test_full_mask_reproduces_standard_training(smoke_config, lm_source, quick_train):
    standard = pretrain(build_model(smoke_config, seed=0), lm_source, quick_train, StandardMode())
    degenerate = pretrain(build_model(smoke_config, seed=0), lm_source, quick_train,
                          PMPMode(rho=1.0, t_eb=3, required_streak=2))
    assert degenerate.mask.k == degenerate.mask.d
    assert np.array_equal(standard.checkpoint.params, degenerate.checkpoint.params)


def test_continue_after_warmup_starts_from_warmed_weights(smoke_config, lm_source, quick_train):
    result = pretrain(build_model(smoke_config, seed=0), lm_source, quick_train,
                      PMPMode(rho=0.5, t_eb=3, required_streak=5, continue_after_warmup=True))
    frozen = ~result.mask.bits
    assert not np.array_equal(result.checkpoint.params[frozen], result.theta0[frozen])


def test_random_mask_source(smoke_config, lm_source, quick_train):
    result = pretrain(build_model(smoke_config, seed=0), lm_source, quick_train,
                      PMPMode(rho=0.7, mask_source="random"))
    assert result.mask.k == mask_size(result.checkpoint.d, 0.7)
    assert result.earlybird_history == []
    assert all(r["phase"] == "train" for r in result.metrics.records)


def test_discover_mask_respects_warmup_cap(smoke_config, lm_source, quick_train):
    model = build_model(smoke_config, seed=0)
    mask, tracker = discover_mask(model, lm_source, quick_train, PMPMode(rho=0.7, t_eb=3, required_streak=5))
    assert tracker.calls == 3 and tracker.adopted
    assert mask.layout_hash == model.layout.layout_hash
    with pytest.raises(ConfigError):
        discover_mask(model, lm_source, quick_train, PMPMode(t_eb=quick_train.total_updates + 1))


def test_supplied_mask_must_fit(smoke_config, lm_source, quick_train):
    with pytest.raises(CompatibilityError):
        pretrain(build_model(smoke_config, seed=0), lm_source, quick_train,
                 PMPMode(mask=BinaryMask.full(10)))


def test_eval_loss_reported(smoke_config, lm_source, quick_train):
    held = lm_source.take(2)
    result = pretrain(build_model(smoke_config, seed=0), lm_source, quick_train, eval_blocks=held)
    assert math.isfinite(result.initial_eval_loss) and math.isfinite(result.final_eval_loss)


def test_data_exhaustion(smoke_config):
    source = BlockSource([b"a" * 40, b"b" * 40], block_len=16)
    cfg = TrainConfig(warmup_updates=0, total_updates=10, micro_batch=2)
    with pytest.raises(TrainingError):
        pretrain(build_model(smoke_config, seed=0), source, cfg)


# -------------------------
# Fine-tuning
# -------------------------

@pytest.fixture
def ft_config():
    return FinetuneConfig(lr=1e-2, epochs=1, micro_batch=8, seed=0)


def test_authorized_with_full_mask_equals_unauthorized(smoke_checkpoint, keyword_data, ft_config):
    full = BinaryMask.full(smoke_checkpoint.d, smoke_checkpoint.layout_hash)
    auth = finetune(smoke_checkpoint, keyword_data, ft_config, FinetuneMode.authorized_masked(full),
                    with_baseline=False)
    unauth = finetune(smoke_checkpoint, keyword_data, ft_config, FinetuneMode.unauthorized_full(),
                      with_baseline=False)
    assert np.array_equal(auth.model.flat(), unauth.model.flat())
    assert auth.post_accuracy == unauth.post_accuracy
    assert not np.array_equal(auth.model.flat(), smoke_checkpoint.params)


def test_authorized_mask_freezes_complement(smoke_checkpoint, keyword_data, ft_config):
    bits = np.zeros(smoke_checkpoint.d, dtype=bool)
    bits[: smoke_checkpoint.d // 2] = True
    mask = BinaryMask(bits, 0.5, smoke_checkpoint.layout_hash)
    result = finetune(smoke_checkpoint, keyword_data, ft_config, FinetuneMode.authorized_masked(mask),
                      with_baseline=False)
    assert np.array_equal(result.model.flat()[~bits], smoke_checkpoint.params[~bits])


def test_mismatched_mask_is_rejected(smoke_checkpoint, keyword_data, ft_config):
    with pytest.raises(CompatibilityError):
        finetune(smoke_checkpoint, keyword_data, ft_config, FinetuneMode.authorized_masked(BinaryMask.full(10)))


def test_lora_rank_zero_trains_only_the_head(smoke_checkpoint, keyword_data, ft_config):
    result = finetune(smoke_checkpoint, keyword_data, ft_config, FinetuneMode.lora(rank=0), with_baseline=False)
    assert result.model.lora == {}
    assert np.array_equal(result.model.flat(), smoke_checkpoint.params)


def test_lora_leaves_base_weights_untouched(smoke_checkpoint, keyword_data, ft_config):
    result = finetune(smoke_checkpoint, keyword_data, ft_config, FinetuneMode.lora(rank=2, alpha=4.0),
                      with_baseline=False)
    assert len(result.model.lora) == 4
    assert np.array_equal(result.model.flat(), smoke_checkpoint.params)


def test_head_only_gain_is_zero(smoke_checkpoint, keyword_data, ft_config):
    result = finetune(smoke_checkpoint, keyword_data, ft_config, FinetuneMode.head_only())
    assert result.gain == 0.0


def test_gain_is_measured_against_head_only(smoke_checkpoint, keyword_data, ft_config):
    head = finetune(smoke_checkpoint, keyword_data, ft_config, FinetuneMode.head_only())
    full = finetune(smoke_checkpoint, keyword_data, ft_config, FinetuneMode.unauthorized_full())
    assert full.baseline_accuracy == head.post_accuracy
    assert full.gain == pytest.approx(full.post_accuracy - head.post_accuracy)


def test_finetune_needs_classification_task(smoke_checkpoint, ft_config):
    from core.data import SyntheticTask, gen_synthetic
    from core.errors import DataError
    lm = gen_synthetic(SyntheticTask("markov-lm", n_train=4, n_eval=2))
    with pytest.raises(DataError):
        finetune(smoke_checkpoint, lm, ft_config)


def test_finetune_schedule_length(ft_config):
    cfg = replace(ft_config, epochs=3).train_config(32)
    assert cfg.total_updates == 12
    assert cfg.warmup_updates == 1
