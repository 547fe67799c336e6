"""
Tiny decoder-only transformer in the LLaMA family: RMS-norm, SiLU-gated MLP,
rotary position embeddings and grouped-query causal attention.

Only the base parameters belong to the FlatParamLayout. The classification
head and LoRA adapters are fine-tuning additions kept outside of it.
"""

import math
from dataclasses import asdict, dataclass, fields
from typing import Dict, List, Sequence, Tuple

import numpy as np

from core import autodiff as ad
from core.autodiff import FlatParamLayout, Parameter, Tensor
from core.errors import ConfigError, DataError, StateError
from core.quantgeom import SeededStream, gaussian
from core.utils import get_logger

logger = get_logger("PMP.model")

INIT_STD = 0.02
LORA_TARGETS = ("wq", "wk", "wv", "wo")


@dataclass
class ModelConfig:
    n_layers: int = 2
    hidden_size: int = 64
    n_heads: int = 4
    n_kv_heads: int = 2
    intermediate_size: int = 128
    vocab_size: int = 256
    max_seq_len: int = 256
    rope_theta: float = 10000.0

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.n_heads

    @property
    def kv_dim(self) -> int:
        return self.head_dim * self.n_kv_heads

    def validate(self) -> "ModelConfig":
        for name in ("n_layers", "hidden_size", "n_heads", "n_kv_heads",
                     "intermediate_size", "vocab_size", "max_seq_len"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.hidden_size % self.n_heads != 0:
            raise ConfigError(f"hidden_size ({self.hidden_size}) must be divisible by n_heads ({self.n_heads})")
        if self.n_heads % self.n_kv_heads != 0:
            raise ConfigError(f"n_heads ({self.n_heads}) must be divisible by n_kv_heads ({self.n_kv_heads})")
        if self.head_dim % 2 != 0:
            raise ConfigError(f"head_dim ({self.head_dim}) must be even for rotary embeddings")
        if self.max_seq_len < 2:
            raise ConfigError(f"max_seq_len must be >= 2, got {self.max_seq_len}")
        if not (self.rope_theta > 0):
            raise ConfigError(f"rope_theta must be positive, got {self.rope_theta}")
        return self

    def to_dict(self) -> Dict[str, object]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, object]) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        kwargs = {k: (float(v) if k == "rope_theta" else int(v)) for k, v in data.items()}
        return cls(**kwargs).validate()


MODEL_PRESETS: Dict[str, ModelConfig] = {
    "desk": ModelConfig(),
    "smoke": ModelConfig(n_layers=1, hidden_size=16, n_heads=2, n_kv_heads=1,
                         intermediate_size=32, vocab_size=256, max_seq_len=64),
}


def base_param_shapes(config: ModelConfig) -> List[Tuple[str, Tuple[int, ...]]]:
    """Names and shapes of all base parameters in canonical layout order."""
    h, kv, inter, v = config.hidden_size, config.kv_dim, config.intermediate_size, config.vocab_size
    shapes: List[Tuple[str, Tuple[int, ...]]] = [("embed.weight", (v, h))]
    for i in range(config.n_layers):
        p = f"layers.{i}"
        shapes += [
            (f"{p}.attn_norm.gain", (h,)),
            (f"{p}.attn.wq", (h, h)),
            (f"{p}.attn.wk", (h, kv)),
            (f"{p}.attn.wv", (h, kv)),
            (f"{p}.attn.wo", (h, h)),
            (f"{p}.mlp_norm.gain", (h,)),
            (f"{p}.mlp.w_gate", (h, inter)),
            (f"{p}.mlp.w_up", (h, inter)),
            (f"{p}.mlp.w_down", (inter, h)),
        ]
    shapes += [("final_norm.gain", (h,)), ("lm_head.weight", (h, v))]
    return shapes


# ---------------------------------------------------------------------------
# Rotary embeddings
# ---------------------------------------------------------------------------

def rope_tables(seq_len: int, head_dim: int, theta: float) -> Tuple[np.ndarray, np.ndarray]:
    """cos/sin tables of shape (seq_len, head_dim), rotate-half pairing."""
    half = head_dim // 2
    inv_freq = theta ** (-np.arange(half, dtype=np.float64) * 2.0 / head_dim)
    angles = np.outer(np.arange(seq_len, dtype=np.float64), inv_freq)
    angles = np.concatenate([angles, angles], axis=1)
    return np.cos(angles), np.sin(angles)


def apply_rope(x: Tensor, cos: Tensor, sin: Tensor) -> Tensor:
    """Rotate (..., T, head_dim) by position; preserves the norm of every vector."""
    hd = x.shape[-1]
    x1 = ad.slice_axis(x, -1, 0, hd // 2)
    x2 = ad.slice_axis(x, -1, hd // 2, hd)
    rotated = ad.concat([ad.scale(x2, -1.0), x1], axis=-1)
    return ad.add(ad.multiply(x, cos), ad.multiply(rotated, sin))


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

class Model:
    def __init__(self, config: ModelConfig, params: Dict[str, Parameter]):
        self.config = config
        self.params = params
        self.layout = FlatParamLayout.from_params(list(params.values()))
        self.head: Dict[str, Parameter] = {}
        self.n_classes = 0
        self.lora: Dict[str, Tuple[Parameter, Parameter]] = {}
        self.lora_scale = 0.0
        self._cos, self._sin = rope_tables(config.max_seq_len, config.head_dim, config.rope_theta)

    # --- parameter groups --------------------------------------------------

    @property
    def d(self) -> int:
        return self.layout.d

    def base_params(self) -> List[Parameter]:
        return list(self.params.values())

    def extra_params(self) -> List[Parameter]:
        """Head and adapter parameters (never part of the flat layout)."""
        out = list(self.head.values())
        for name in sorted(self.lora):
            out.extend(self.lora[name])
        return out

    def flat(self) -> np.ndarray:
        return ad.flatten_params(self.base_params(), self.layout)

    def load_flat(self, flat: np.ndarray):
        ad.load_flat(self.base_params(), self.layout, flat)

    # --- fine-tuning attachments ------------------------------------------

    def attach_head(self, n_classes: int, seed: int = 0):
        if n_classes < 2:
            raise ConfigError(f"classification head needs >= 2 classes, got {n_classes}")
        stream = SeededStream(seed).split(0x4EAD)
        w = gaussian(stream, self.config.hidden_size * n_classes) * INIT_STD
        self.head = {
            "head.weight": Parameter("head.weight", w.reshape(self.config.hidden_size, n_classes)),
            "head.bias": Parameter("head.bias", np.zeros(n_classes)),
        }
        self.n_classes = n_classes

    def attach_lora(self, rank: int, alpha: float, seed: int = 0):
        """Rank-r adapters on the attention projections; B starts at zero."""
        if rank < 0:
            raise ConfigError(f"LoRA rank must be >= 0, got {rank}")
        self.lora = {}
        if rank == 0:
            self.lora_scale = 0.0
            return
        self.lora_scale = float(alpha) / rank
        stream = SeededStream(seed).split(0x10FA)
        for i, name in enumerate(n for n in self.params if n.split(".")[-1] in LORA_TARGETS):
            fan_in, fan_out = self.params[name].shape
            a = gaussian(stream.split(i), fan_in * rank) / math.sqrt(fan_in)
            self.lora[name] = (
                Parameter(f"{name}.lora_a", a.reshape(fan_in, rank)),
                Parameter(f"{name}.lora_b", np.zeros((rank, fan_out))),
            )
        logger.debug(f"LoRA attached: rank={rank} alpha={alpha} targets={len(self.lora)}")

    # --- forward -----------------------------------------------------------

    def _linear(self, x: Tensor, name: str) -> Tensor:
        y = ad.matmul(x, self.params[name])
        adapter = self.lora.get(name)
        if adapter is not None:
            a, b = adapter
            y = ad.add(y, ad.scale(ad.matmul(ad.matmul(x, a), b), self.lora_scale))
        return y

    def _attention(self, x: Tensor, i: int, cos: Tensor, sin: Tensor) -> Tensor:
        c = self.config
        b, t, _ = x.shape
        group = c.n_heads // c.n_kv_heads
        p = f"layers.{i}.attn"
        q = ad.reshape(self._linear(x, f"{p}.wq"), (b, t, c.n_kv_heads, group, c.head_dim))
        k = ad.reshape(self._linear(x, f"{p}.wk"), (b, t, c.n_kv_heads, 1, c.head_dim))
        v = ad.reshape(self._linear(x, f"{p}.wv"), (b, t, c.n_kv_heads, 1, c.head_dim))
        # (B, kv, group, T, hd); keys/values broadcast over the query group
        q = apply_rope(ad.transpose(q, (0, 2, 3, 1, 4)), cos, sin)
        k = apply_rope(ad.transpose(k, (0, 2, 3, 1, 4)), cos, sin)
        v = ad.transpose(v, (0, 2, 3, 1, 4))
        scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(c.head_dim))
        att = ad.softmax(ad.causal_mask_fill(scores), axis=-1)
        out = ad.transpose(ad.matmul(att, v), (0, 3, 1, 2, 4))
        return self._linear(ad.reshape(out, (b, t, c.hidden_size)), f"{p}.wo")

    def _mlp(self, x: Tensor, i: int) -> Tensor:
        p = f"layers.{i}.mlp"
        gate = ad.silu(ad.matmul(x, self.params[f"{p}.w_gate"]))
        up = ad.matmul(x, self.params[f"{p}.w_up"])
        return ad.matmul(ad.multiply(gate, up), self.params[f"{p}.w_down"])

    def hidden(self, tokens) -> Tensor:
        """Final-norm hidden states (B, L, H) for a token batch (B, L)."""
        ids = self._check_tokens(tokens)
        t = ids.shape[1]
        cos, sin = Tensor(self._cos[:t]), Tensor(self._sin[:t])
        x = ad.embedding_lookup(self.params["embed.weight"], ids)
        for i in range(self.config.n_layers):
            x = ad.add(x, self._attention(ad.rms_norm(x, self.params[f"layers.{i}.attn_norm.gain"]), i, cos, sin))
            x = ad.add(x, self._mlp(ad.rms_norm(x, self.params[f"layers.{i}.mlp_norm.gain"]), i))
        return ad.rms_norm(x, self.params["final_norm.gain"])

    def logits(self, tokens) -> Tensor:
        return ad.matmul(self.hidden(tokens), self.params["lm_head.weight"])

    def class_logits(self, tokens) -> Tensor:
        if not self.head:
            raise StateError("classification head not attached; call attach_head first")
        h = self.hidden(tokens)
        b, t, hs = h.shape
        last = ad.reshape(ad.slice_axis(h, 1, t - 1, t), (b, hs))
        return ad.add(ad.matmul(last, self.head["head.weight"]), self.head["head.bias"])

    def _check_tokens(self, tokens) -> np.ndarray:
        ids = np.asarray(tokens)
        if ids.ndim == 1:
            ids = ids[None, :]
        if ids.ndim != 2:
            raise DataError(f"token block must be (L,) or (B, L), got shape {ids.shape}")
        if not np.issubdtype(ids.dtype, np.integer):
            raise DataError(f"tokens must be integers, got {ids.dtype}")
        if ids.shape[1] > self.config.max_seq_len:
            raise DataError(f"block length {ids.shape[1]} exceeds max_seq_len {self.config.max_seq_len}")
        bad = np.argwhere((ids < 0) | (ids >= self.config.vocab_size))
        if bad.size:
            row, pos = (int(v) for v in bad[0])
            raise DataError(f"token {int(ids[row, pos])} at position {pos} (row {row}) outside [0, {self.config.vocab_size})")
        return ids.astype(np.int64)


def build_model(config: ModelConfig, seed: int) -> Model:
    """Randomly initialised model: normal(0, 0.02) matrices, unit norm gains."""
    config.validate()
    root = SeededStream(seed)
    params: Dict[str, Parameter] = {}
    for i, (name, shape) in enumerate(base_param_shapes(config)):
        if name.endswith(".gain"):
            data = np.ones(shape)
        else:
            data = (gaussian(root.split(i), int(np.prod(shape))) * INIT_STD).reshape(shape)
        params[name] = Parameter(name, data)
    model = Model(config, params)
    logger.debug(f"MODEL_BUILT: d={model.d} layers={config.n_layers} hidden={config.hidden_size} seed={seed}")
    return model


# ---------------------------------------------------------------------------
# Losses and evaluation
# ---------------------------------------------------------------------------

def lm_loss(model: Model, token_block) -> Tensor:
    """Next-token cross-entropy over the L-1 predicted positions of each block."""
    ids = model._check_tokens(token_block)
    if ids.shape[1] < 2:
        raise DataError(f"language-model block needs at least 2 tokens, got {ids.shape[1]}")
    logits = model.logits(ids)
    t = ids.shape[1]
    return ad.cross_entropy_mean(ad.slice_axis(logits, 1, 0, t - 1), ids[:, 1:])


def cls_loss(model: Model, token_block, label) -> Tensor:
    """Cross-entropy of the head applied to the final-position hidden state."""
    if not model.head:
        raise StateError("classification head not attached; call attach_head first")
    labels = np.atleast_1d(np.asarray(label))
    bad = np.argwhere((labels < 0) | (labels >= model.n_classes))
    if bad.size:
        i = int(bad[0][0])
        raise DataError(f"label {int(labels[i])} at index {i} outside [0, {model.n_classes})")
    return ad.cross_entropy_mean(model.class_logits(token_block), labels.astype(np.int64))


def evaluate_lm(model: Model, blocks: Sequence[np.ndarray], batch_size: int = 8) -> float:
    """Mean held-out LM loss (forward only)."""
    blocks = list(blocks)
    if not blocks:
        raise DataError("evaluate_lm: no evaluation blocks")
    total = 0.0
    for start in range(0, len(blocks), batch_size):
        batch = np.stack(blocks[start:start + batch_size])
        total += lm_loss(model, batch).item() * len(batch)
    return total / len(blocks)


def classify(model: Model, tokens: np.ndarray, batch_size: int = 32) -> np.ndarray:
    preds = []
    for start in range(0, len(tokens), batch_size):
        preds.append(np.argmax(model.class_logits(tokens[start:start + batch_size]).data, axis=-1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def accuracy(model: Model, tokens: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        raise DataError("accuracy: no examples")
    return float(np.mean(classify(model, tokens) == np.asarray(labels)))
