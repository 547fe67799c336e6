import os
import tempfile

# must happen before core.utils configures the file handler
os.environ.setdefault("PMP_LOG_DIR", tempfile.mkdtemp(prefix="pmp-test-logs-"))
os.environ.pop("PMP_SEED", None)

from dataclasses import replace

import numpy as np
import pytest

from core.data import BlockSource, SyntheticTask, gen_synthetic
from core.model import MODEL_PRESETS, ModelConfig, build_model
from core.trainer import Checkpoint, TrainConfig


@pytest.fixture
def smoke_config() -> ModelConfig:
    return replace(MODEL_PRESETS["smoke"])


@pytest.fixture
def tiny_config() -> ModelConfig:
    return ModelConfig(n_layers=1, hidden_size=8, n_heads=2, n_kv_heads=1, intermediate_size=16,
                       vocab_size=16, max_seq_len=16)


@pytest.fixture
def smoke_model(smoke_config):
    return build_model(smoke_config, seed=0)


@pytest.fixture
def smoke_checkpoint(smoke_model) -> Checkpoint:
    return Checkpoint.from_model(smoke_model)


@pytest.fixture
def lm_source():
    task = SyntheticTask("markov-lm", seed=0, length=32)
    return BlockSource.from_task(task, block_len=16, shuffle_buffer=8, seed=0)


@pytest.fixture
def quick_train() -> TrainConfig:
    return TrainConfig(base_lr=1e-3, warmup_updates=2, total_updates=12, micro_batch=2, seed=0)


@pytest.fixture
def keyword_data():
    return gen_synthetic(SyntheticTask("keyword-cls", seed=0, n_train=32, n_eval=16, length=16))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
