"""
Optimization engine: AdamW with warmup + cosine schedule, global-norm
clipping and gradient accumulation; standard and masked (PMP) pre-training;
fine-tuning in unauthorized, authorized, LoRA and head-only modes.
"""

import json
import math
import queue
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from core import autodiff as ad
from core.autodiff import FlatParamLayout, Parameter, Tape
from core.data import BlockSource, SyntheticData
from core.errors import (ArgumentError, CompatibilityError, ConfigError, DataError,
                         NumericError, TrainingError)
from core.mask import (BinaryMask, EarlyBirdTracker, MaskLike, as_bits, check_rho,
                       eligibility, mask_size, random_mask)
from core.model import Model, ModelConfig, accuracy, build_model, cls_loss, evaluate_lm, lm_loss
from core.quantgeom import SeededStream, l2norm, permutation
from core.utils import get_logger, human_count

logger = get_logger("PMP.trainer")

MIN_LR_RATIO = 0.1
CLIP_EPS = 1e-6


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    base_lr: float = 3e-4
    warmup_updates: int = 200
    total_updates: int = 2000
    micro_batch: int = 8
    grad_accum: int = 1
    clip_norm: float = 1.0
    weight_decay: float = 0.01
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 42

    def validate(self) -> "TrainConfig":
        if self.total_updates < 1 or self.micro_batch < 1 or self.grad_accum < 1:
            raise ConfigError(
                f"total_updates, micro_batch and grad_accum must be positive "
                f"(got {self.total_updates}, {self.micro_batch}, {self.grad_accum})"
            )
        if not (0 <= self.warmup_updates <= self.total_updates):
            raise ConfigError(f"warmup_updates ({self.warmup_updates}) must be in [0, total_updates={self.total_updates}]")
        if not (self.base_lr > 0):
            raise ConfigError(f"base_lr must be positive, got {self.base_lr}")
        if self.clip_norm < 0 or self.weight_decay < 0 or not (self.eps > 0):
            raise ConfigError("clip_norm and weight_decay must be >= 0 and eps > 0")
        b1, b2 = self.betas
        if not (0 <= b1 < 1 and 0 <= b2 < 1):
            raise ConfigError(f"betas must lie in [0, 1), got {self.betas}")
        return self

    @property
    def min_lr(self) -> float:
        return MIN_LR_RATIO * self.base_lr


def lr_at(update_index: int, config: TrainConfig) -> float:
    """Linear warmup base_lr*(t+1)/warmup, then cosine decay to 0.1*base_lr at the last update."""
    t = int(update_index)
    if not (0 <= t < config.total_updates):
        raise ArgumentError(f"lr_at: update index {t} outside [0, {config.total_updates})")
    if t < config.warmup_updates:
        return config.base_lr * (t + 1) / config.warmup_updates
    span = max(config.total_updates - 1 - config.warmup_updates, 1)
    progress = min((t - config.warmup_updates) / span, 1.0)
    return config.min_lr + (config.base_lr - config.min_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    step_count: int = 0
    last_grad_norm: float = 0.0

    @classmethod
    def zeros(cls, d: int) -> "OptimizerState":
        return cls(np.zeros(d), np.zeros(d))


def clip_by_global_norm(g: np.ndarray, clip_norm: float) -> Tuple[np.ndarray, float]:
    """Returns (clipped gradient, norm before clipping). clip_norm 0 disables clipping."""
    norm = l2norm(g)
    if clip_norm > 0 and norm > clip_norm:
        g = g * (clip_norm / (norm + CLIP_EPS))
    return g, norm


def step(params_flat: np.ndarray, grads_flat: np.ndarray, state: OptimizerState, config: TrainConfig,
         mask: Optional[MaskLike] = None, lr: Optional[float] = None) -> np.ndarray:
    """
    One AdamW update. With a mask the gradient is projected first, then
    clipped, then fed to the moments; frozen coordinates of the parameters and
    of both moments come back bit-identical and weight decay skips them.
    A non-finite gradient raises NumericError and leaves state untouched.
    """
    if params_flat.shape != grads_flat.shape or state.m.shape != params_flat.shape:
        raise ArgumentError(
            f"step: params {params_flat.shape}, grads {grads_flat.shape} and state {state.m.shape} must match"
        )
    g = np.asarray(grads_flat, dtype=np.float64)
    bad = ~np.isfinite(g)
    if bad.any():
        raise NumericError(f"non-finite gradient at coordinate {int(np.flatnonzero(bad)[0])}; step aborted")
    bits = None
    if mask is not None:
        bits = as_bits(mask)
        if bits.shape != g.shape:
            raise ArgumentError(f"step: mask length {bits.shape[0]} != d {g.shape[0]}")
        g = np.where(bits, g, 0.0)
    g, norm = clip_by_global_norm(g, config.clip_norm)

    lr = config.base_lr if lr is None else lr
    b1, b2 = config.betas
    t = state.step_count + 1
    p = params_flat.astype(np.float64)
    m = b1 * state.m + (1.0 - b1) * g
    v = b2 * state.v + (1.0 - b2) * g * g
    m_hat = m / (1.0 - b1 ** t)
    v_hat = v / (1.0 - b2 ** t)
    new_p = p - lr * (m_hat / (np.sqrt(v_hat) + config.eps) + config.weight_decay * p)
    if bits is not None:
        new_p = np.where(bits, new_p, p)
        m = np.where(bits, m, state.m)
        v = np.where(bits, v, state.v)

    state.m, state.v, state.step_count, state.last_grad_norm = m, v, t, norm
    return new_p.astype(params_flat.dtype)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

class MetricsLog:
    """
    Append-only JSON-lines metrics. Records are always kept in memory; with a
    path they are also written, optionally by a background flush thread.
    """

    def __init__(self, path: Optional[Union[str, Path]] = None, background: bool = False):
        self.records: List[Dict[str, object]] = []
        self.path = Path(path) if path else None
        self._fh = None
        self._queue: Optional[queue.Queue] = None
        self._thread: Optional[threading.Thread] = None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(self.path, "w", encoding="utf-8", newline="\n")
            if background:
                self._queue = queue.Queue()
                self._thread = threading.Thread(target=self._drain, name="pmp-metrics", daemon=True)
                self._thread.start()

    def _drain(self):
        while True:
            line = self._queue.get()
            if line is None:
                break
            self._fh.write(line)
            self._fh.flush()

    def record(self, **fields):
        rec = {k: v for k, v in fields.items() if v is not None}
        self.records.append(rec)
        if self._fh is None:
            return
        line = json.dumps(rec, sort_keys=True) + "\n"
        if self._queue is not None:
            self._queue.put(line)
        else:
            self._fh.write(line)

    def close(self):
        if self._queue is not None:
            self._queue.put(None)
            self._thread.join()
            self._queue = None
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        self.close()
        return False


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    """Released weights: dense parameters and metadata, never mask information."""
    layout_hash: int
    d: int
    params: np.ndarray
    model_config: Dict[str, object]
    meta: Dict[str, object] = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: Model, **meta) -> "Checkpoint":
        flat = model.flat().astype(np.float32)
        return cls(model.layout.layout_hash, model.d, flat, model.config.to_dict(), dict(meta))

    def to_model(self) -> Model:
        model = build_model(ModelConfig.from_dict(self.model_config), seed=0)
        if model.layout.layout_hash != self.layout_hash or model.d != self.d:
            raise CompatibilityError(
                f"checkpoint layout {self.layout_hash:#018x} (d={self.d}) does not match its model config "
                f"layout {model.layout.layout_hash:#018x} (d={model.d})"
            )
        model.load_flat(self.params.astype(np.float32))
        return model


# ---------------------------------------------------------------------------
# Shared update loop
# ---------------------------------------------------------------------------

class ParamGroup:
    """The trainable parameters of one run seen as a single flat vector."""

    def __init__(self, params: Sequence[Parameter]):
        self.params = list(params)
        self.layout = FlatParamLayout.from_params(self.params)

    @property
    def d(self) -> int:
        return self.layout.d

    def flat(self) -> np.ndarray:
        return ad.flatten_params(self.params, self.layout)

    def load(self, flat: np.ndarray):
        ad.load_flat(self.params, self.layout, flat)

    def gradient(self, loss_fn: Callable[[], ad.Tensor]) -> Tuple[float, np.ndarray]:
        with Tape() as tape:
            loss = loss_fn()
        tape.backward(loss, self.params)
        return loss.item(), ad.flatten_grads(self.params, self.layout).astype(np.float64)


def _accumulate(group: ParamGroup, model: Model, batches: Iterator[np.ndarray], grad_accum: int,
                done: int, total: int, phase: str) -> Tuple[float, np.ndarray]:
    loss_sum, g_sum = 0.0, None
    for _ in range(grad_accum):
        try:
            batch = next(batches)
        except StopIteration:
            raise TrainingError(
                f"data exhausted during {phase} after {done} of {total} updates; "
                f"provide a larger corpus or fewer updates"
            ) from None
        loss, g = group.gradient(lambda: lm_loss(model, batch))
        loss_sum += loss
        g_sum = g if g_sum is None else g_sum + g
    return loss_sum / grad_accum, g_sum / grad_accum


# ---------------------------------------------------------------------------
# Pre-training
# ---------------------------------------------------------------------------

@dataclass
class StandardMode:
    name: str = "standard"


@dataclass
class PMPMode:
    rho: float = 0.7
    t_eb: int = 100
    iou_threshold: float = 0.99
    required_streak: int = 5
    exclude: Tuple[str, ...] = ()
    ema_beta: Optional[float] = None
    continue_after_warmup: bool = False
    mask_source: str = "earlybird"
    mask: Optional[BinaryMask] = None
    name: str = "pmp"

    def validate(self) -> "PMPMode":
        check_rho(self.rho)
        if self.t_eb < 1:
            raise ConfigError(f"t_eb must be >= 1, got {self.t_eb}")
        if self.mask_source not in ("earlybird", "random"):
            raise ConfigError(f"mask_source must be 'earlybird' or 'random', got {self.mask_source!r}")
        return self


@dataclass
class PretrainResult:
    checkpoint: Checkpoint
    mask: Optional[BinaryMask]
    metrics: MetricsLog
    earlybird_history: List[Tuple[int, float]] = field(default_factory=list)
    earlybird_converged: bool = False
    initial_eval_loss: Optional[float] = None
    final_eval_loss: Optional[float] = None
    theta0: Optional[np.ndarray] = None


def discover_mask(model: Model, source: BlockSource, config: TrainConfig, mode: PMPMode,
                  metrics: Optional[MetricsLog] = None) -> Tuple[BinaryMask, EarlyBirdTracker]:
    """
    EarlyBird warm-up: unmasked AdamW updates on the start of the stream,
    feeding |grad| to the tracker until it converges or t_EB updates pass.
    The model is left at theta(t) and the caller decides whether to restore.
    """
    mode.validate()
    if mode.t_eb > config.total_updates:
        raise ConfigError(f"t_eb ({mode.t_eb}) exceeds total_updates ({config.total_updates})")
    group = ParamGroup(model.base_params())
    eligible = eligibility(model.layout, mode.exclude)
    k = mask_size(int(np.count_nonzero(eligible)), mode.rho)
    tracker = EarlyBirdTracker(mode.iou_threshold, mode.required_streak, mode.ema_beta,
                               eligible=None if eligible.all() else eligible,
                               layout_hash=model.layout.layout_hash, rho=mode.rho)
    state = OptimizerState.zeros(group.d)
    batches = source.batches(config.micro_batch)
    params = group.flat()
    logger.info(f"EARLYBIRD_START: rho={mode.rho} k={k} t_eb={mode.t_eb} d={group.d}")
    for t in range(mode.t_eb):
        loss, g = _accumulate(group, model, batches, config.grad_accum, t, mode.t_eb, "warm-up")
        found = tracker.step(np.abs(g), k)
        lr = lr_at(t, config)
        params = step(params, g, state, config, None, lr)
        group.load(params)
        if metrics is not None:
            score = tracker.history[-1][1] if tracker.history else None
            metrics.record(phase="warmup", step=t, loss=loss, lr=lr, grad_norm=state.last_grad_norm, iou=score)
        if found is not None:
            break
    mask = tracker.converged_mask if tracker.converged else tracker.adopt_last()
    return mask.with_layout(model.layout.layout_hash), tracker


def pretrain(model: Model, source: BlockSource, config: TrainConfig,
             mode: Union[StandardMode, PMPMode, None] = None,
             metrics: Optional[MetricsLog] = None,
             eval_blocks: Optional[Sequence[np.ndarray]] = None) -> PretrainResult:
    """
    Standard or PMP pre-training. In PMP mode: snapshot theta(0), discover the
    mask, restore theta(0) (unless continue_after_warmup), restart the stream
    and train only the masked coordinates. The checkpoint carries no mask.
    """
    config.validate()
    mode = mode or StandardMode()
    metrics = metrics if metrics is not None else MetricsLog()
    group = ParamGroup(model.base_params())
    theta0 = group.flat().copy()
    result = PretrainResult(Checkpoint.from_model(model), None, metrics, theta0=theta0)
    if eval_blocks:
        result.initial_eval_loss = evaluate_lm(model, eval_blocks)

    mask: Optional[BinaryMask] = None
    if isinstance(mode, PMPMode):
        mode.validate()
        if mode.mask is not None:
            mask = mode.mask
            if mask.d != model.d or (mask.layout_hash and mask.layout_hash != model.layout.layout_hash):
                raise CompatibilityError(
                    f"supplied mask (d={mask.d}, layout {mask.layout_hash:#018x}) does not fit model "
                    f"(d={model.d}, layout {model.layout.layout_hash:#018x})"
                )
            logger.info(f"MASK_SUPPLIED: k={mask.k} d={mask.d}")
        elif mode.mask_source == "random":
            eligible = eligibility(model.layout, mode.exclude)
            mask = random_mask(model.d, mode.rho, config.seed, eligible, model.layout.layout_hash)
            logger.info(f"MASK_RANDOM: k={mask.k} d={mask.d} seed={config.seed}")
        else:
            mask, tracker = discover_mask(model, source, config, mode, metrics)
            result.earlybird_history = list(tracker.history)
            result.earlybird_converged = not tracker.adopted
            if not mode.continue_after_warmup:
                group.load(theta0)
                logger.info("WARMUP_RESTORED: parameters reset to theta(0) before masked training")
            else:
                logger.info("WARMUP_CONTINUE: masked training starts from theta(t_EB)")
        result.mask = mask

    state = OptimizerState.zeros(group.d)
    batches = source.batches(config.micro_batch)
    params = group.flat()
    logger.info(f"PRETRAIN_START: mode={mode.name} updates={config.total_updates} d={human_count(group.d)}")
    for t in range(config.total_updates):
        loss, g = _accumulate(group, model, batches, config.grad_accum, t, config.total_updates, "pre-training")
        lr = lr_at(t, config)
        params = step(params, g, state, config, mask, lr)
        group.load(params)
        metrics.record(phase="train", step=t, loss=loss, lr=lr, grad_norm=state.last_grad_norm)
        if t % 100 == 0 or t == config.total_updates - 1:
            logger.debug(f"PRETRAIN_STEP: t={t} loss={loss:.4f} lr={lr:.3e} grad_norm={state.last_grad_norm:.4f}")

    if eval_blocks:
        result.final_eval_loss = evaluate_lm(model, eval_blocks)
    result.checkpoint = Checkpoint.from_model(model, steps=config.total_updates, mode=mode.name)
    logger.info(f"PRETRAIN_DONE: mode={mode.name} final_loss={metrics.records[-1]['loss']:.4f}")
    return result


# ---------------------------------------------------------------------------
# Fine-tuning
# ---------------------------------------------------------------------------

FINETUNE_KINDS = ("unauthorized_full", "authorized_masked", "lora", "head_only")


@dataclass
class FinetuneConfig:
    lr: float = 1e-3
    epochs: int = 3
    micro_batch: int = 16
    warmup_fraction: float = 0.1
    clip_norm: float = 1.0
    weight_decay: float = 0.0
    seed: int = 42

    def validate(self) -> "FinetuneConfig":
        if self.epochs < 1 or self.micro_batch < 1:
            raise ConfigError(f"epochs and micro_batch must be positive, got {self.epochs}/{self.micro_batch}")
        if not (self.lr > 0) or not (0 <= self.warmup_fraction < 1):
            raise ConfigError(f"invalid fine-tuning lr {self.lr} or warmup_fraction {self.warmup_fraction}")
        return self

    def train_config(self, n_examples: int) -> TrainConfig:
        total = self.epochs * max(n_examples // self.micro_batch, 1)
        return TrainConfig(base_lr=self.lr, warmup_updates=int(self.warmup_fraction * total),
                           total_updates=total, micro_batch=self.micro_batch, grad_accum=1,
                           clip_norm=self.clip_norm, weight_decay=self.weight_decay,
                           seed=self.seed).validate()


@dataclass
class FinetuneMode:
    kind: str = "unauthorized_full"
    mask: Optional[BinaryMask] = None
    rank: int = 8
    alpha: float = 16.0

    @classmethod
    def unauthorized_full(cls) -> "FinetuneMode":
        return cls("unauthorized_full")

    @classmethod
    def authorized_masked(cls, mask: BinaryMask) -> "FinetuneMode":
        return cls("authorized_masked", mask=mask)

    @classmethod
    def lora(cls, rank: int = 8, alpha: float = 16.0) -> "FinetuneMode":
        return cls("lora", rank=rank, alpha=alpha)

    @classmethod
    def head_only(cls) -> "FinetuneMode":
        return cls("head_only")

    def validate(self) -> "FinetuneMode":
        if self.kind not in FINETUNE_KINDS:
            raise ConfigError(f"unknown fine-tuning mode {self.kind!r}; expected one of {FINETUNE_KINDS}")
        if self.kind == "authorized_masked" and self.mask is None:
            raise ConfigError("authorized_masked fine-tuning needs a mask")
        return self


@dataclass
class FinetuneResult:
    model: Model
    metrics: MetricsLog
    pre_accuracy: float
    post_accuracy: float
    baseline_accuracy: float

    @property
    def gain(self) -> float:
        return self.post_accuracy - self.baseline_accuracy


def _run_classifier(model: Model, params: List[Parameter], mask_bits: Optional[np.ndarray],
                    tokens: np.ndarray, labels: np.ndarray, config: FinetuneConfig,
                    metrics: MetricsLog, label: str):
    group = ParamGroup(params)
    tc = config.train_config(len(labels))
    state = OptimizerState.zeros(group.d)
    flat = group.flat()
    per_epoch = tc.total_updates // config.epochs
    t = 0
    for epoch in range(config.epochs):
        order = permutation(SeededStream(config.seed).split(epoch), len(labels))
        for b in range(per_epoch):
            idx = order[b * config.micro_batch:(b + 1) * config.micro_batch]
            loss, g = group.gradient(lambda: cls_loss(model, tokens[idx], labels[idx]))
            lr = lr_at(t, tc)
            flat = step(flat, g, state, tc, mask_bits, lr)
            group.load(flat)
            metrics.record(phase=label, step=t, loss=loss, lr=lr, grad_norm=state.last_grad_norm)
            t += 1
        logger.debug(f"FINETUNE_EPOCH: mode={label} epoch={epoch} loss={metrics.records[-1]['loss']:.4f}")


def finetune(checkpoint: Checkpoint, task: SyntheticData, config: FinetuneConfig,
             mode: Optional[FinetuneMode] = None, metrics: Optional[MetricsLog] = None,
             head_seed: Optional[int] = None, with_baseline: bool = True) -> FinetuneResult:
    """
    Fine-tune a released checkpoint on a classification task. The gain is the
    held-out accuracy after fine-tuning minus that of a trained head on the
    frozen base (the head_only run from the same head initialisation).
    """
    config.validate()
    mode = (mode or FinetuneMode()).validate()
    metrics = metrics if metrics is not None else MetricsLog()
    if not task.task.is_classification:
        raise DataError(f"fine-tuning needs a classification task, got {task.task.kind}")
    tokens, labels = task.arrays("train")
    eval_tokens, eval_labels = task.arrays("eval")
    if len(eval_labels) == 0:
        raise DataError("fine-tuning task has no evaluation examples")
    n_classes = max(int(labels.max()) + 1, 2)
    head_seed = config.seed if head_seed is None else head_seed

    if mode.kind == "authorized_masked":
        m = mode.mask
        if m.layout_hash != checkpoint.layout_hash or m.d != checkpoint.d:
            raise CompatibilityError(
                f"mask layout {m.layout_hash:#018x} (d={m.d}) does not match checkpoint layout "
                f"{checkpoint.layout_hash:#018x} (d={checkpoint.d}); wrong mask for this checkpoint"
            )

    model = checkpoint.to_model()
    model.attach_head(n_classes, head_seed)
    pre = accuracy(model, eval_tokens, eval_labels)

    mask_bits = None
    if mode.kind == "authorized_masked":
        params = model.base_params() + model.extra_params()
        head_size = sum(p.size for p in model.head.values())
        mask_bits = np.concatenate([m.bits, np.ones(head_size, dtype=bool)])
    elif mode.kind == "unauthorized_full":
        params = model.base_params() + model.extra_params()
    elif mode.kind == "lora":
        model.attach_lora(mode.rank, mode.alpha, head_seed)
        params = model.extra_params()
    else:
        params = model.extra_params()

    logger.info(f"FINETUNE_START: mode={mode.kind} trainable={human_count(sum(p.size for p in params))} "
                f"train={len(labels)} eval={len(eval_labels)}")
    _run_classifier(model, params, mask_bits, tokens, labels, config, metrics, mode.kind)
    post = accuracy(model, eval_tokens, eval_labels)

    if mode.kind == "head_only" or not with_baseline:
        baseline = post if mode.kind == "head_only" else float("nan")
    else:
        baseline = finetune(checkpoint, task, config, FinetuneMode.head_only(),
                            head_seed=head_seed, with_baseline=False).post_accuracy
    logger.info(f"FINETUNE_DONE: mode={mode.kind} pre={pre:.4f} post={post:.4f} "
                f"baseline={baseline:.4f} gain={post - baseline:+.4f}")
    return FinetuneResult(model, metrics, pre, post, baseline)
