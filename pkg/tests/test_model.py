import math

import numpy as np
import pytest

from core import autodiff as ad
from core.autodiff import Tape, Tensor, precision
from core.errors import CompatibilityError, ConfigError, DataError, StateError
from core.model import (ModelConfig, apply_rope, base_param_shapes, build_model, cls_loss, evaluate_lm,
                        lm_loss, rope_tables)
from core.trainer import Checkpoint


def test_desk_parameter_count_matches_hand_count():
    cfg = ModelConfig()
    embed = 256 * 64
    per_layer = 64 + 64 * 64 + 64 * 32 + 64 * 32 + 64 * 64 + 64 + 3 * 64 * 128
    final = 64
    lm_head = 64 * 256
    expected = embed + 2 * per_layer + final + lm_head
    assert expected == 106816
    assert build_model(cfg, seed=0).d == expected
    assert sum(int(np.prod(s)) for _, s in base_param_shapes(cfg)) == expected


def test_layout_order():
    names = [n for n, _ in base_param_shapes(ModelConfig(n_layers=1))]
    assert names[0] == "embed.weight"
    assert names[1:4] == ["layers.0.attn_norm.gain", "layers.0.attn.wq", "layers.0.attn.wk"]
    assert names[-2:] == ["final_norm.gain", "lm_head.weight"]


def test_same_seed_same_parameters(smoke_config):
    a = build_model(smoke_config, seed=3).flat()
    b = build_model(smoke_config, seed=3).flat()
    c = build_model(smoke_config, seed=4).flat()
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


@pytest.mark.parametrize("kwargs", [
    dict(hidden_size=65, n_heads=4),
    dict(n_heads=4, n_kv_heads=3),
    dict(n_layers=0),
    dict(hidden_size=12, n_heads=4),
])
def test_invalid_configs(kwargs):
    with pytest.raises(ConfigError):
        ModelConfig(**kwargs).validate()


def test_config_dict_round_trip():
    cfg = ModelConfig(n_layers=3)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"n_layers": 2, "dropout": 0.1})


def test_untrained_loss_near_uniform(smoke_model, rng):
    block = rng.integers(0, 256, size=(2, 32))
    loss = lm_loss(smoke_model, block).item()
    assert abs(loss - math.log(256)) < 0.1 * math.log(256)


def test_two_token_block_scores_one_position(smoke_model):
    ids = np.array([[5, 9]])
    z = smoke_model.logits(ids).numpy()[0, 0].astype(np.float64)
    expected = np.log(np.exp(z - z.max()).sum()) + z.max() - z[9]
    assert lm_loss(smoke_model, ids).item() == pytest.approx(expected, abs=1e-5)


def test_single_token_block_rejected(smoke_model):
    with pytest.raises(DataError):
        lm_loss(smoke_model, np.array([[5]]))


def test_attention_is_causal(smoke_model, rng):
    a = rng.integers(0, 256, size=(1, 12))
    b = a.copy()
    b[0, 5] = (b[0, 5] + 1) % 256
    la = smoke_model.logits(a).numpy()
    lb = smoke_model.logits(b).numpy()
    assert np.allclose(la[:, :5], lb[:, :5], atol=1e-6)
    assert not np.allclose(la[:, 5:], lb[:, 5:], atol=1e-6)


def test_rope_preserves_norms(rng):
    with precision(np.float64):
        x = Tensor(rng.normal(size=(1, 1, 1, 6, 8)))
        cos, sin = rope_tables(6, 8, 10000.0)
        y = apply_rope(x, Tensor(cos), Tensor(sin)).numpy()
    assert np.allclose(np.linalg.norm(y, axis=-1), np.linalg.norm(x.numpy(), axis=-1), rtol=1e-12)
    assert np.allclose(y[..., 0, :], x.numpy()[..., 0, :])


def test_token_out_of_vocabulary(smoke_model):
    with pytest.raises(DataError, match="position 3"):
        smoke_model.logits(np.array([[1, 2, 3, 256]]))


def test_block_longer_than_context(smoke_model):
    with pytest.raises(DataError):
        smoke_model.logits(np.zeros((1, 65), dtype=np.int64))


def test_lm_gradients_match_finite_differences(tiny_config, rng):
    with precision(np.float64):
        model = build_model(tiny_config, seed=1)
        block = rng.integers(0, tiny_config.vocab_size, size=(2, 6))
        params = model.base_params()
        with Tape() as tape:
            loss = lm_loss(model, block)
        tape.backward(loss, params)
        grads = ad.flatten_grads(params, model.layout)
        theta = model.flat().copy()
        coords = rng.choice(model.d, size=25, replace=False)
        numeric = []
        h = 1e-5
        for i in coords:
            up, down = theta.copy(), theta.copy()
            up[i] += h
            down[i] -= h
            model.load_flat(up)
            lu = lm_loss(model, block).item()
            model.load_flat(down)
            ld = lm_loss(model, block).item()
            numeric.append((lu - ld) / (2 * h))
        model.load_flat(theta)
    analytic = grads[coords]
    numeric = np.array(numeric)
    assert np.linalg.norm(analytic - numeric) <= 1e-4 * max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-12)


def test_classification_head(smoke_model):
    with pytest.raises(StateError):
        smoke_model.class_logits(np.zeros((1, 4), dtype=np.int64))
    smoke_model.attach_head(2, seed=0)
    smoke_model.head["head.weight"].data[:] = 0.0
    tokens = np.array([[1, 2, 3, 4], [5, 6, 7, 8]])
    assert cls_loss(smoke_model, tokens, np.array([0, 1])).item() == pytest.approx(math.log(2), rel=1e-6)
    with pytest.raises(DataError):
        cls_loss(smoke_model, tokens, np.array([0, 2]))


def test_lora_starts_as_identity(smoke_model, rng):
    tokens = rng.integers(0, 256, size=(1, 8))
    before = smoke_model.logits(tokens).numpy()
    smoke_model.attach_lora(rank=4, alpha=8.0, seed=0)
    assert len(smoke_model.lora) == 4
    assert np.allclose(smoke_model.logits(tokens).numpy(), before, atol=1e-7)
    smoke_model.attach_lora(rank=0, alpha=8.0)
    assert smoke_model.lora == {}
    assert smoke_model.extra_params() == []


def test_evaluate_lm(smoke_model, rng):
    blocks = [rng.integers(0, 256, size=16) for _ in range(5)]
    mean = evaluate_lm(smoke_model, blocks, batch_size=2)
    direct = np.mean([lm_loss(smoke_model, b).item() for b in blocks])
    assert mean == pytest.approx(direct, rel=1e-5)
    with pytest.raises(DataError):
        evaluate_lm(smoke_model, [])


def test_checkpoint_round_trip(smoke_model):
    ckpt = Checkpoint.from_model(smoke_model, note="x")
    assert np.array_equal(ckpt.to_model().flat(), smoke_model.flat())
    ckpt.model_config = dict(ckpt.model_config, n_layers=2)
    with pytest.raises(CompatibilityError):
        ckpt.to_model()
